#include "vermouth/cli.hpp"

int main(int argc, char** argv) { return vermouth::cli_main(argc, argv); }
