#include "ktraj/cli.hpp"

int main(int argc, char** argv) { return ktraj::cli::run(argc, argv); }
