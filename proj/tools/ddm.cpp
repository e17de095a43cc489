#include "ddm/cli.hpp"

int main(int argc, char** argv) { return ddm::cli::cmd_dispatch(argc, argv); }
