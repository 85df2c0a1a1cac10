// Minimal embedding provider for protocol tests. Answers each request with
// [mean byte value of the PNG file, file size, 0.5]; no decoding.
//
//   fake_provider            well-behaved, DIM 3
//   fake_provider baddim     handshake garbage
//   fake_provider short      replies with too few values
//   fake_provider die        exits right after the handshake
#include <fstream>
#include <iostream>
#include <iterator>
#include <string>
#include <vector>

int main(int argc, char** argv) {
  const std::string mode = argc > 1 ? argv[1] : "";
  if (mode == "baddim") {
    std::cout << "HELLO" << std::endl;
    return 0;
  }
  std::cout << "DIM 3" << std::endl;
  if (mode == "die") return 0;
  std::string line;
  while (std::getline(std::cin, line)) {
    if (line == "QUIT") break;
    if (line.rfind("EMBED ", 0) != 0) {
      std::cout << "ERR" << std::endl;
      continue;
    }
    std::ifstream f(line.substr(6), std::ios::binary);
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    double sum = 0.0;
    for (unsigned char b : bytes) sum += b;
    const double mean = bytes.empty() ? 0.0 : sum / static_cast<double>(bytes.size());
    if (mode == "short") {
      std::cout << mean << std::endl;
    } else {
      std::cout << mean << ' ' << static_cast<double>(bytes.size()) << " 0.5" << std::endl;
    }
  }
  return 0;
}
