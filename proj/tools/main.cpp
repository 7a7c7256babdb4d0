#include "calibrag/cli.hpp"

int main(int argc, char** argv) { return calibrag::cli::run(argc, argv); }
