#include <cstdio>

int main() {
  std::puts("gradprom cli: not wired up yet");
  return 0;
}
