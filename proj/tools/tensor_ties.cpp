#include "tensor_ties/cli.hpp"

int main(int argc, char** argv)
{
    return tensor_ties::cli::run(argc, argv);
}
