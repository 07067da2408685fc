#include <cstdio>

int main() {
    std::puts("m2m: subcommands not wired up yet");
    return 2;
}
