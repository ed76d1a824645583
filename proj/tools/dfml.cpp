#include "dfml/cli.hpp"

int main(int argc, char** argv) {
    return dfml::run_cli(std::vector<std::string>(argv + 1, argv + argc));
}
