#pragma once

#include <string>
#include <vector>

#include "hspec/common.hpp"

namespace hspec {

// Deterministic English-like filler text. Sentences come from a small
// phrase grammar over fixed word lists, so the byte stream has learnable
// word- and phrase-level structure at a few hundred distinct words.
inline std::string generate_corpus(size_t n_bytes, uint64_t seed) {
    static const char* subjects[] = {
        "the river",     "a traveler",   "the old clock",  "our neighbor",  "the gardener",
        "a grey cat",    "the captain",  "the machine",    "an archivist",  "the lighthouse",
        "a young fox",   "the carpenter","the tide",       "a schoolgirl",  "the baker",
        "the committee", "a messenger",  "the orchard",    "the stranger",  "a small boat"};
    static const char* verbs[] = {
        "watched",  "carried",  "remembered", "followed", "repaired",  "ignored",
        "measured", "crossed",  "gathered",   "painted",  "borrowed",  "counted",
        "opened",   "promised", "sheltered",  "traced",   "questioned","weighed"};
    static const char* objects[] = {
        "the narrow road",   "a wooden ladder",  "the morning light", "an empty basket",
        "the harbor wall",   "a folded map",     "the winter garden", "a copper kettle",
        "the silent mill",   "a row of lanterns","the paper ledger",  "an iron gate",
        "the low field",     "a broken compass", "the distant hills", "a sack of grain"};
    static const char* adverbs[] = {"slowly",    "carefully", "quietly", "again",
                                    "at dusk",   "by hand",   "without a word",
                                    "every morning", "in the rain", "for years"};
    static const char* connectors[] = {"and", "but", "while", "because", "until", "so"};

    Rng rng(seed);
    auto pick = [&rng](const char* const* xs, size_t n) { return xs[rng.uniform_u64(n)]; };
    std::string out;
    out.reserve(n_bytes + 128);
    int sentences_in_par = 0;
    int par_target = 3 + int(rng.uniform_u64(4));
    while (out.size() < n_bytes) {
        std::string s = pick(subjects, 20);
        s += ' ';
        s += pick(verbs, 18);
        s += ' ';
        s += pick(objects, 16);
        if (rng.uniform() < 0.5) {
            s += ' ';
            s += pick(adverbs, 10);
        }
        if (rng.uniform() < 0.3) {
            s += ", ";
            s += pick(connectors, 6);
            s += ' ';
            s += pick(subjects, 20);
            s += ' ';
            s += pick(verbs, 18);
            s += ' ';
            s += pick(objects, 16);
        }
        s[0] = char(s[0] - 'a' + 'A');
        s += ". ";
        out += s;
        if (++sentences_in_par >= par_target) {
            out += "\n\n";
            sentences_in_par = 0;
            par_target = 3 + int(rng.uniform_u64(4));
        }
    }
    out.resize(n_bytes);
    return out;
}

}  // namespace hspec
