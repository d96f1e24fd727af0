#include "fedcast/experiment.hpp"

int main(int argc, char** argv) { return fedcast::run_cli(argc, argv); }
