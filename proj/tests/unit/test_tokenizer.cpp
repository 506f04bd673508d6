#include <doctest.h>

#include <json.hpp>

#include "causalscope/error.hpp"
#include "causalscope/tokenizer.hpp"
#include "support.hpp"

using namespace causalscope;
using test_support::gpt2_tables;

namespace {

// Independent rendition of GPT-2's byte -> printable code point table.
std::vector<std::string> byte_symbols() {
    std::vector<int> bs;
    for (int b = 33; b <= 126; ++b) bs.push_back(b);
    for (int b = 161; b <= 172; ++b) bs.push_back(b);
    for (int b = 174; b <= 255; ++b) bs.push_back(b);
    std::vector<int> cps(256, -1);
    for (int b : bs) cps[b] = b;
    int n = 0;
    for (int b = 0; b < 256; ++b) {
        if (cps[b] < 0) cps[b] = 256 + n++;
    }
    std::vector<std::string> out;
    for (int cp : cps) {
        std::string s;
        if (cp < 0x80) {
            s.push_back(static_cast<char>(cp));
        } else {
            s.push_back(static_cast<char>(0xC0 | (cp >> 6)));
            s.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
        }
        out.push_back(s);
    }
    return out;
}

std::vector<std::pair<std::string, TokenId>> byte_vocab() {
    std::vector<std::pair<std::string, TokenId>> v;
    const auto syms = byte_symbols();
    for (int b = 0; b < 256; ++b) v.emplace_back(syms[b], b);
    return v;
}

nlohmann::json reference_fixture() {
    return nlohmann::json::parse(test_support::read_text(test_support::fixtures() / "tokenizer_reference.json"));
}

} // namespace

TEST_CASE("released tables load with the expected sizes") {
    const auto fx = reference_fixture();
    const auto& t = gpt2_tables();
    CHECK(t.vocab_size() == fx["vocab_size"].get<std::size_t>());
    CHECK(t.vocab_size() == 50257);
    CHECK(t.merge_count() == fx["merge_count"].get<std::size_t>());
    CHECK(t.merge_rank("Ġ", "t") == 0);
}

TEST_CASE("byte encoder matches the GPT-2 scheme and is a bijection") {
    const auto& t = gpt2_tables();
    const auto syms = byte_symbols();
    std::set<std::string> distinct;
    for (int b = 0; b < 256; ++b) {
        CHECK(t.byte_symbol(static_cast<std::uint8_t>(b)) == syms[b]);
        distinct.insert(syms[b]);
    }
    CHECK(distinct.size() == 256);
}

TEST_CASE("encode edge cases") {
    const auto& t = gpt2_tables();
    CHECK(encode(t, "").ids.empty());
    CHECK(encode(t, "because").ids == std::vector<TokenId>{13893});
    CHECK(encode(t, " because").ids == std::vector<TokenId>{780});
    CHECK(encode(t, "I opened an umbrella because it started raining").ids ==
          std::vector<TokenId>{40, 4721, 281, 25510, 780, 340, 2067, 43079});
}

TEST_CASE("encode matches the frozen reference corpus and round-trips") {
    const auto fx = reference_fixture();
    const auto& t = gpt2_tables();
    int checked = 0;
    for (const auto& rec : fx["sentences"]) {
        const auto text = rec["text"].get<std::string>();
        const auto expected = rec["ids"].get<std::vector<TokenId>>();
        const auto got = encode(t, text);
        CHECK_MESSAGE(got.ids == expected, text);
        CHECK(decode(t, got.ids) == text);

        // Offsets are contiguous and cover the whole byte range.
        std::size_t pos = 0;
        for (const auto& off : got.offsets) {
            CHECK(off.begin == pos);
            CHECK(off.end > off.begin);
            pos = off.end;
        }
        CHECK(pos == text.size());
        ++checked;
    }
    CHECK(checked == 100);
}

TEST_CASE("encode is deterministic") {
    const auto& t = gpt2_tables();
    const std::string s = "Bob and Chris made cookies so they are proud and full";
    CHECK(encode(t, s).ids == encode(t, s).ids);
}

TEST_CASE("decode") {
    const auto& t = gpt2_tables();
    CHECK(decode(t, std::vector<TokenId>{}).empty());
    CHECK(decode(t, std::vector<TokenId>{50256}) == reference_fixture()["end_of_text"].get<std::string>());
    CHECK_THROWS_AS(decode(t, std::vector<TokenId>{50257}), ArgumentError);
    CHECK_THROWS_AS(decode(t, std::vector<TokenId>{-1}), ArgumentError);
}

TEST_CASE("pretokenize whitespace and contraction rules") {
    auto pieces = [](std::string_view s) {
        std::vector<std::string> out;
        for (auto sp : pretokenize(s)) out.emplace_back(s.substr(sp.begin, sp.end - sp.begin));
        return out;
    };
    CHECK(pieces("  hello   world") == std::vector<std::string>{" ", " hello", "  ", " world"});
    CHECK(pieces("don't") == std::vector<std::string>{"don", "'t"});
    CHECK(pieces("'S") == std::vector<std::string>{"'", "S"});
    CHECK(pieces("a\tb") == std::vector<std::string>{"a", "\t", "b"});
    CHECK(pieces("x  ") == std::vector<std::string>{"x", "  "});
    CHECK(pieces("abc123!!") == std::vector<std::string>{"abc", "123", "!!"});
}

TEST_CASE("load_bpe rejects malformed inputs") {
    test_support::TempDir dir;
    const auto vocab = dir.file("vocab.json");
    const auto merges = dir.file("merges.txt");

    nlohmann::json v = nlohmann::json::object();
    for (const auto& [tok, id] : byte_vocab()) v[tok] = id;

    SUBCASE("malformed JSON") {
        test_support::write_text(vocab, "{\"a\": 1,");
        test_support::write_text(merges, "#version: 0.2\n");
        CHECK_THROWS_AS(load_bpe(vocab, merges), ParseError);
    }
    SUBCASE("duplicate id") {
        auto dup = v;
        dup["zz"] = 3;
        test_support::write_text(vocab, dup.dump());
        test_support::write_text(merges, "#version: 0.2\n");
        try {
            load_bpe(vocab, merges);
            FAIL("expected ParseError");
        } catch (const ParseError& e) {
            CHECK(std::string(e.what()).find("duplicate id") != std::string::npos);
        }
    }
    SUBCASE("merge with unknown symbol names the line") {
        auto ext = v;
        ext["ab"] = 256;
        test_support::write_text(vocab, ext.dump());
        test_support::write_text(merges, "#version: 0.2\na b\nq qq\n");
        try {
            load_bpe(vocab, merges);
            FAIL("expected ParseError");
        } catch (const ParseError& e) {
            CHECK(std::string(e.what()).find("line 3") != std::string::npos);
        }
    }
    SUBCASE("empty merges fall back to byte tokens") {
        test_support::write_text(vocab, v.dump());
        test_support::write_text(merges, "#version: 0.2\n");
        const auto t = load_bpe(vocab, merges);
        CHECK(t.merge_count() == 0);
        const auto enc = encode(t, "hi é");
        CHECK(enc.ids.size() == 5); // h, i, space, and two bytes of é
        CHECK(decode(t, enc.ids) == "hi é");
    }
}

TEST_CASE("from_data applies merges by rank") {
    auto vocab = byte_vocab();
    vocab.emplace_back("ab", 256);
    vocab.emplace_back("abc", 257);
    vocab.emplace_back("bc", 258);
    const auto t = BpeTables::from_data(vocab, {{"b", "c"}, {"a", "b"}, {"a", "bc"}});
    // "b c" has the lowest rank, so "abc" resolves through "a" + "bc".
    CHECK(encode(t, "abc").ids == std::vector<TokenId>{257});
    CHECK(encode(t, "ab").ids == std::vector<TokenId>{256});
    CHECK(encode(t, "abab").ids == std::vector<TokenId>{256, 256});
}
