// Deterministic English-like corpus generator for training and benchmarks.

#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "hspec/textgen.hpp"

int main(int argc, char** argv) {
    CLI::App app{"generate a deterministic text corpus"};
    std::string out;
    long bytes = 1200000;
    uint64_t seed = 1;
    app.add_option("--out", out, "output file")->required();
    app.add_option("--bytes", bytes, "corpus size in bytes");
    app.add_option("--seed", seed);
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }
    if (bytes < 1) {
        std::cerr << "config error: --bytes must be positive\n";
        return 2;
    }
    std::ofstream f(out, std::ios::binary);
    if (!f) {
        std::cerr << "io error: cannot write " << out << "\n";
        return 3;
    }
    f << hspec::generate_corpus(size_t(bytes), seed);
    std::cout << "wrote " << bytes << " bytes to " << out << "\n";
    return 0;
}
