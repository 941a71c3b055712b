#include "niwmeta/cli.hpp"

int main(int argc, char** argv) { return niwmeta::run_cli(argc, argv); }
