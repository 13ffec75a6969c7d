#include "deltafusion/cli.hpp"

int main(int argc, char** argv) { return deltafusion::run_cli(argc, argv); }
