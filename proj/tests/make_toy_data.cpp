// Writes the two-class synthetic PGM folder used by the CLI tests.
#include <cstdlib>
#include <iostream>

#include "hifuse/synthetic.hpp"

int main(int argc, char** argv) {
  if (argc != 5) {
    std::cerr << "usage: " << argv[0] << " <dir> <count> <size> <seed>\n";
    return 2;
  }
  hifuse::write_synthetic_folder(argv[1], std::atoi(argv[2]), std::atoi(argv[3]), std::strtoull(argv[4], nullptr, 10));
  return 0;
}
