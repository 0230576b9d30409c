#include <manifold_forge/cli.hpp>

int main(int argc, char** argv) { return mforge::cli::run_main(argc, argv); }
