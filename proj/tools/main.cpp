#include <adaptq/cli.hpp>

int main(int argc, char** argv) { return adaptq::run_cli(argc, argv); }
