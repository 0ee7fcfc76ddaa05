#include "relsim/sim.hpp"

int main(int argc, char** argv) { return relsim::run_cli(argc, argv); }
