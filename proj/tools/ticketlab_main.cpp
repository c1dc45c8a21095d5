#include "ticketlab/harness.hpp"

int main(int argc, char** argv) { return tl::harness::cli(argc, argv); }
