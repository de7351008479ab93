#pragma once

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "e2e/tensor.hpp"

namespace e2e::vocab {

/// Character inventory. Ids are 1-based: id 0 is reserved (CTC blank /
/// decoder end-of-sequence), characters occupy 1..K in file order.
struct Charset {
    std::string chars;

    int size() const { return static_cast<int>(chars.size()); }
    bool has(char c) const { return chars.find(c) != std::string::npos; }
    int id(char c) const {
        const auto pos = chars.find(c);
        if (pos == std::string::npos)
            throw Error(std::string("charset: unknown character '") + c + "'");
        return static_cast<int>(pos) + 1;
    }
    char at(int id) const {
        if (id < 1 || id > size()) throw Error("charset: id " + std::to_string(id) + " out of range");
        return chars[id - 1];
    }
    std::vector<int> encode(const std::string& text) const {
        std::vector<int> out;
        out.reserve(text.size());
        for (char c : text) out.push_back(id(c));
        return out;
    }
    std::string decode(const std::vector<int>& ids) const {
        std::string out;
        out.reserve(ids.size());
        for (int i : ids) out.push_back(at(i));
        return out;
    }

    static Charset from_transcripts(const std::vector<std::string>& texts) {
        std::set<char> seen;
        for (const auto& t : texts)
            for (char c : t) seen.insert(c);
        Charset cs;
        cs.chars.assign(seen.begin(), seen.end());
        if (cs.chars.empty()) throw Error("charset: no characters in transcripts");
        return cs;
    }

    static std::string escape(char c) {
        if (c == ' ') return "<space>";
        return std::string(1, c);
    }
    static char unescape(const std::string& s) {
        if (s == "<space>") return ' ';
        if (s.size() != 1) throw Error("charset: bad symbol line '" + s + "'");
        return s[0];
    }
    void save(const std::string& path) const {
        std::ofstream f(path);
        if (!f) throw Error("charset: cannot write " + path);
        for (char c : chars) f << escape(c) << "\n";
    }
    static Charset load(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw Error("charset: cannot read " + path);
        Charset cs;
        std::string line;
        while (std::getline(f, line))
            if (!line.empty()) cs.chars.push_back(unescape(line));
        if (cs.chars.empty()) throw Error("charset: empty file " + path);
        return cs;
    }
};

/// Word inventory. Ids are 1-based in file order; 0 is reserved for the
/// language model's end-of-sequence, out-of-vocabulary words map to -1.
struct WordVocab {
    std::vector<std::string> words;
    std::unordered_map<std::string, int> index;

    int size() const { return static_cast<int>(words.size()); }
    int id(const std::string& w) const {
        auto it = index.find(w);
        return it == index.end() ? -1 : it->second;
    }
    const std::string& at(int id) const {
        if (id < 1 || id > size())
            throw Error("word vocab: id " + std::to_string(id) + " out of range");
        return words[id - 1];
    }
    void rebuild_index() {
        index.clear();
        for (std::size_t i = 0; i < words.size(); ++i) {
            if (index.count(words[i]))
                throw Error("word vocab: duplicate word '" + words[i] + "'");
            index[words[i]] = static_cast<int>(i) + 1;
        }
    }

    static std::vector<std::string> split_words(const std::string& text) {
        std::vector<std::string> out;
        std::istringstream ss(text);
        std::string w;
        while (ss >> w) out.push_back(w);
        return out;
    }

    static WordVocab from_transcripts(const std::vector<std::string>& texts) {
        std::set<std::string> seen;
        for (const auto& t : texts)
            for (const auto& w : split_words(t)) seen.insert(w);
        WordVocab v;
        v.words.assign(seen.begin(), seen.end());
        if (v.words.empty()) throw Error("word vocab: no words in transcripts");
        v.rebuild_index();
        return v;
    }

    void save(const std::string& path) const {
        std::ofstream f(path);
        if (!f) throw Error("word vocab: cannot write " + path);
        for (const auto& w : words) f << w << "\n";
    }
    static WordVocab load(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw Error("word vocab: cannot read " + path);
        WordVocab v;
        std::string line;
        while (std::getline(f, line))
            if (!line.empty()) v.words.push_back(line);
        if (v.words.empty()) throw Error("word vocab: empty file " + path);
        v.rebuild_index();
        return v;
    }
};

}  // namespace e2e::vocab
