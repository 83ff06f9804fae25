#include "embgen/cli.hpp"

int main(int argc, char** argv) { return embgen::cli::run(argc, argv); }
