#include "strokeseg/cli.hpp"

int main(int argc, char** argv) { return strokeseg::cli_dispatch(argc, argv); }
