#include "exitlab/cli.hpp"

int main(int argc, char** argv) { return exitlab::run_cli(argc, argv); }
