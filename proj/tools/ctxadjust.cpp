#include "cli.hpp"

int main(int argc, char** argv) { return ctxadjust::cli::run(argc, argv); }
