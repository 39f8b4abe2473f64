#include "cli.hpp"

int main(int argc, char** argv) { return sep::cli::run_cli(argc, argv); }
