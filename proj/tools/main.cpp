#include "cli.hpp"

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <iostream>

int main(int argc, char** argv) {
    spdlog::set_default_logger(spdlog::stderr_color_mt("illusign"));
    spdlog::set_pattern("[%H:%M:%S] %^%l%$ %v");
    return illusign::cli::run(argc, argv, std::cout, std::cerr);
}
