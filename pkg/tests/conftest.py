from __future__ import annotations

import html
import threading
from collections import Counter
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import unquote, urlsplit

import pytest

FIXTURES = Path(__file__).parent / "fixtures"

_acceptance_results: list[tuple[str, str]] = []


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


def _make_handler(root: Path, extra_links: dict[str, list[str]], counts: Counter):
    class Handler(BaseHTTPRequestHandler):
        def log_message(self, *args) -> None:  # keep test output quiet
            pass

        def do_GET(self) -> None:
            raw_path = urlsplit(self.path).path
            counts[raw_path] += 1
            rel = unquote(raw_path).lstrip("/")
            target = (root / rel).resolve() if rel else root.resolve()
            try:
                target.relative_to(root.resolve())
            except ValueError:
                self.send_error(404)
                return
            if target.is_dir():
                if not raw_path.endswith("/"):
                    self.send_error(404)
                    return
                self._send_listing(raw_path, target)
            elif target.is_file():
                data = target.read_bytes()
                self.send_response(200)
                self.send_header("Content-Type", "application/octet-stream")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)
            else:
                self.send_error(404)

        def _send_listing(self, raw_path: str, target: Path) -> None:
            anchors = ['<a href="../">../</a>']
            for entry in sorted(target.iterdir()):
                name = entry.name + ("/" if entry.is_dir() else "")
                anchors.append(f'<a href="{html.escape(name)}">{html.escape(name)}</a>')
            anchors.append('<a href="?C=N;O=D">Name</a>')  # index sort link
            for link in extra_links.get(raw_path, []):
                anchors.append(f'<a href="{link}">{link}</a>')
            body = (
                "<html><head><title>Index of {0}</title></head><body>\n{1}\n</body></html>"
            ).format(html.escape(raw_path), "\n".join(anchors)).encode()
            self.send_response(200)
            self.send_header("Content-Type", "text/html; charset=utf-8")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

    return Handler


@pytest.fixture
def http_tree_server():
    """Start throwaway directory-index servers over local fixture trees.

    Yields a `start(root, extra_links=None)` callable returning
    (base_url, request_counter); all servers are torn down afterwards.
    """
    servers: list[ThreadingHTTPServer] = []

    def start(root: Path, extra_links: dict[str, list[str]] | None = None):
        counts: Counter = Counter()
        handler = _make_handler(root, extra_links or {}, counts)
        server = ThreadingHTTPServer(("127.0.0.1", 0), handler)
        thread = threading.Thread(
            target=server.serve_forever, kwargs={"poll_interval": 0.02}, daemon=True
        )
        thread.start()
        servers.append(server)
        host, port = server.server_address
        return f"http://{host}:{port}/", counts

    yield start
    for server in servers:
        server.shutdown()
        server.server_close()


def pytest_runtest_logreport(report):
    if report.when == "call" and "test_acceptance" in report.nodeid:
        name = report.nodeid.split("::")[-1]
        _acceptance_results.append((name, "PASS" if report.passed else "FAIL"))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_results:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for name, outcome in _acceptance_results:
        terminalreporter.write_line(f"{outcome}  {name}")
