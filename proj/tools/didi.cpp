#include "didi/cli.hpp"

int main(int argc, char** argv) { return didi::cli::run_cli(argc, argv); }
