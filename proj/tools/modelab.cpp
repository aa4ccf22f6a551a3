#include <cstdio>

int main() {
  std::puts("modelab: cli not wired yet");
  return 0;
}
