#include "filmseg/commands.hpp"

int main(int argc, char** argv) { return filmseg::commands::run_cli(argc, argv); }
