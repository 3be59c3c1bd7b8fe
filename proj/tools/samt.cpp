// SPDX-License-Identifier: Apache-2.0
#include "samt_cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return samt::cli::dispatch(args);
}
