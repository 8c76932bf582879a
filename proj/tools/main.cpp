#include "apex/cli.hpp"

int main(int argc, char** argv) { return apex::cli_dispatch(argc, argv); }
