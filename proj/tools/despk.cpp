#include <cstdio>

int main() {
  std::puts("despk: command-line interface not wired yet");
  return 2;
}
