// Deterministic corpus synthesizer for experiments:
//   corpusgen --style prose --tokens 640000 --seed 7 --out pretrain.txt
//   corpusgen --style technical --tokens 62500 --seed 8 --out adapt.txt

#include <cstdio>
#include <fstream>

#include "CLI11.hpp"
#include "knnlm/synth.hpp"

int main(int argc, char** argv) {
    CLI::App app{"synthetic corpus generator"};
    std::string style = "prose";
    std::string out_path;
    size_t tokens = 100000;
    uint64_t seed = 7;
    app.add_option("--style", style, "prose|technical");
    app.add_option("--tokens", tokens, "number of word tokens to emit");
    app.add_option("--seed", seed, "generator seed");
    app.add_option("--out", out_path, "output text file")->required();
    CLI11_PARSE(app, argc, argv);

    try {
        const std::string text =
            knnlm::synth_corpus(knnlm::corpus_style_from_name(style), tokens, seed);
        std::ofstream out(out_path, std::ios::binary);
        out << text;
        if (!out) {
            std::fprintf(stderr, "error: cannot write %s\n", out_path.c_str());
            return 1;
        }
        return 0;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
