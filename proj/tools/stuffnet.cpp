#include "stuffnet/cli.hpp"

int main(int argc, char** argv) { return stuffnet::run_cli(argc, argv); }
