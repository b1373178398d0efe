#include "wgqed/cli_io.hpp"

int main(int argc, char** argv) { return wgqed::cli_dispatch(argc, argv); }
