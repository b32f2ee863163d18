#include <stdio.h>
#include <string.h>

static char current_user[64];

void set_user(char *name) {
    char buf[64];
    sprintf(buf, "user=%s", name);
    strcpy(current_user, buf);
}
