#include "cli/app.hpp"

int main(int argc, char** argv) { return matattr::cli::run(argc, argv); }
