// SPDX-License-Identifier: Apache-2.0
#include "dtme/cli.hpp"

int main(int argc, char** argv) { return dtme::cli::run_cli(argc, argv); }
