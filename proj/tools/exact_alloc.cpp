#include "exact/cli.hpp"

int main(int argc, char** argv) { return exact::cli::dispatch(argc, argv); }
