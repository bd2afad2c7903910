#include "l96/cli.hpp"

int main(int argc, char** argv) { return l96::cli::run(argc, argv); }
