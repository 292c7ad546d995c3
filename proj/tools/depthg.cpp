#include "depthg/cli.hpp"

int main(int argc, char** argv) { return depthg::cli::run(argc, argv); }
