#include "leakgan/cli.hpp"

int main(int argc, char** argv) { return leakgan::cli::run(argc, argv); }
