#include "eft/cli.hpp"

int main(int argc, char** argv) { return eft::cli_main(argc, argv); }
