// SPDX-License-Identifier: Apache-2.0
#include "peftvit_cli.hpp"

int main(int argc, char** argv) { return peftvit::cli::cli_main(argc, argv); }
