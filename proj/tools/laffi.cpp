#include "laffi/cli.hpp"

int main(int argc, char** argv) { return laffi::cli::run(argc, argv); }
