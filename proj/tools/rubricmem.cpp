#include <iostream>

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "rubricmem/cli.hpp"

int main(int argc, char** argv) {
    // Diagnostics go to stderr so stdout stays machine-readable.
    spdlog::set_default_logger(spdlog::stderr_color_mt("rubricmem"));
    return rubricmem::cli::run(argc, argv, std::cout, std::cerr);
}
