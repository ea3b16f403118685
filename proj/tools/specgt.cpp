#include "specgt/cli.hpp"

int main(int argc, char** argv) { return specgt::cli::run(argc, argv); }
