#include "latentflow/cli.hpp"

int main(int argc, char** argv) { return latentflow::cli::run(argc, argv); }
