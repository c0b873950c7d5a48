#include <filesystem>
#include <set>

#include <gtest/gtest.h>

#include "lwaft/tasks.hpp"
#include "lwaft/vocab.hpp"

using namespace lwaft;

namespace {

bool has_structure_delimiter(const std::string& s) {
    return s.find_first_of(structure_delimiters) != std::string::npos;
}

std::size_t case_tokens(const TaskCase& c) { return c.prompt.size() + c.ground_truth.size() + 1; }

} // namespace

TEST(RenderDocument, ProseHasNoStructureDelimiters) {
    for (const auto& g : builtin_domains()) {
        for (std::uint64_t s = 0; s < 500; ++s) {
            const auto doc = render_document(VLevel::V0, g, s);
            ASSERT_FALSE(has_structure_delimiter(doc.text)) << doc.text;
        }
    }
}

TEST(RenderDocument, Deterministic) {
    for (const auto& g : builtin_domains()) {
        for (auto v : all_v_levels) {
            const auto a = render_document(v, g, 42);
            const auto b = render_document(v, g, 42);
            EXPECT_EQ(a.text, b.text);
            EXPECT_EQ(a.annotations, b.annotations);
        }
    }
}

TEST(RenderDocument, SegmentsAreShuffledOutOfLogicalOrder) {
    for (const auto& g : builtin_domains()) {
        for (std::uint64_t s = 0; s < 1000; ++s) {
            const auto doc = render_document(VLevel::V2, g, s);
            std::vector<int> logical;
            for (const auto& seg : doc.annotations.segments) {
                if (seg.logical_index >= 0) {
                    logical.push_back(seg.logical_index);
                }
            }
            ASSERT_GE(logical.size(), 2u);
            ASSERT_FALSE(std::is_sorted(logical.begin(), logical.end())) << doc.text;
        }
    }
}

TEST(RenderDocument, AnnotationsMatchText) {
    for (const auto& g : builtin_domains()) {
        for (auto v : all_v_levels) {
            for (std::uint64_t s = 0; s < 300; ++s) {
                const auto doc = render_document(v, g, s);
                ASSERT_LE(doc.text.size(), max_doc_len);
                ASSERT_TRUE(vocab::encodable(doc.text));
                for (const auto& f : doc.annotations.fields) {
                    ASSERT_NE(doc.text.find(f.value), std::string::npos) << doc.text;
                    if (v != VLevel::V0) {
                        ASSERT_NE(doc.text.find(f.key), std::string::npos) << doc.text;
                    }
                }
                for (const auto& seg : doc.annotations.segments) {
                    ASSERT_LT(seg.begin, seg.end);
                    ASSERT_LE(seg.end, doc.text.size());
                }
            }
        }
    }
}

TEST(MakeCase, TranscriptionOfProseIsVerbatim) {
    const auto doc = render_document(VLevel::V0, domain_grammar("gazette"), 3);
    const auto c = make_case(RLevel::R0, doc, 11);
    EXPECT_EQ(c.ground_truth, doc.text);
    EXPECT_EQ(c.tags.task_type, "transcribe");
    EXPECT_EQ(c.answer_kind, AnswerKind::free_text);
}

TEST(MakeCase, TranscriptionOfSegmentsDropsDistractorAndRestoresOrder) {
    const auto& g = domain_grammar("gazette");
    const auto doc = render_document(VLevel::V2, g, 5);
    const auto c = make_case(RLevel::R0, doc, 1);
    std::string expected;
    for (std::size_t i = 0; i < doc.annotations.fields.size(); ++i) {
        const auto& f = doc.annotations.fields[i];
        expected += (i > 0 ? ";" : "") + f.key + ":" + f.value;
    }
    EXPECT_EQ(c.ground_truth, expected);
    EXPECT_EQ(c.ground_truth.find(doc.annotations.distractors[0].key + ":"), std::string::npos);
}

TEST(MakeCase, LookupReadsAnnotation) {
    for (std::uint64_t s = 0; s < 200; ++s) {
        const auto doc = render_document(static_cast<VLevel>(s % 3), domain_grammar("ledger"), s);
        const auto c = make_case(RLevel::R1, doc, s);
        // recover the key from the query and look it up independently
        const auto q = c.prompt.rfind(" ?");
        const auto key = c.prompt.substr(q + 2, c.prompt.size() - q - 3);
        const auto* f = doc.annotations.find(key);
        ASSERT_NE(f, nullptr) << c.prompt;
        ASSERT_EQ(c.ground_truth, f->value);
        ASSERT_FALSE(c.ground_truth.empty());
    }
}

TEST(MakeCase, LookupOnKeylessDocumentIsRejected) {
    RenderedDoc doc;
    doc.text = "nothing here.";
    doc.domain = "gazette";
    EXPECT_THROW(make_case(RLevel::R1, doc, 0), ValidationError);
}

TEST(MakeCase, CompareAnswerRecomputedFromSeededShuffle) {
    // 17 vs 42: rebuild the option order from the case seed and check the letter
    RenderedDoc doc;
    doc.domain = "gazette";
    doc.v_level = VLevel::V1;
    doc.annotations.fields = {{"town", "arlo", false}, {"mills", "17", true}, {"inns", "42", true}};
    doc.text = "town:arlo;mills:17;inns:42";
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        const auto c = make_case(RLevel::R2, doc, seed);
        Rng rng(derive_seed(seed, "case"));
        std::vector<const Field*> numeric{&doc.annotations.fields[1], &doc.annotations.fields[2]};
        rng.shuffle(std::span(numeric));
        std::vector<std::string> opts{numeric[0]->key, numeric[1]->key, "eq"};
        rng.shuffle(std::span(opts));
        const auto pos = std::find(opts.begin(), opts.end(), "inns") - opts.begin();
        EXPECT_EQ(c.ground_truth, std::string(1, "ABC"[pos]));
        EXPECT_NE(c.prompt.find(c.ground_truth + "=inns"), std::string::npos) << c.prompt;
        EXPECT_EQ(c.answer_kind, AnswerKind::choice);
        EXPECT_EQ(c.options, "ABC");
    }
}

TEST(MakeCase, CompareHasExactlyOneCorrectOption) {
    for (const auto& g : builtin_domains()) {
        for (std::uint64_t s = 0; s < 300; ++s) {
            const auto doc = render_document(static_cast<VLevel>(s % 3), g, s);
            const auto c = make_case(RLevel::R2, doc, s + 1);
            // parse "A=k B=k C=k" back out of the prompt
            const auto q = c.prompt.rfind(" ?");
            std::istringstream is(c.prompt.substr(q + 2, c.prompt.size() - q - 3));
            std::string tok;
            std::vector<std::pair<char, std::string>> opts;
            while (is >> tok) {
                opts.emplace_back(tok[0], tok.substr(2));
            }
            ASSERT_EQ(opts.size(), 3u);
            int best = -1;
            std::vector<int> vals;
            for (const auto& [letter, key] : opts) {
                if (key != "eq") {
                    vals.push_back(std::stoi(doc.annotations.find(key)->value));
                    best = std::max(best, vals.back());
                }
            }
            int correct = 0;
            for (const auto& [letter, key] : opts) {
                const bool ok = key == "eq" ? vals[0] == vals[1]
                                            : std::stoi(doc.annotations.find(key)->value) == best && vals[0] != vals[1];
                if (ok) {
                    ++correct;
                    ASSERT_EQ(c.ground_truth, std::string(1, letter));
                }
            }
            ASSERT_EQ(correct, 1);
        }
    }
}

TEST(GenSuite, ExactCellCounts) {
    SuiteConfig cfg;
    cfg.count(RLevel::R0, VLevel::V0) = 5;
    cfg.count(RLevel::R2, VLevel::V2) = 3;
    const auto suite = gen_suite(cfg);
    ASSERT_EQ(suite.cases.size(), 8u);
    std::map<std::string, int> cells;
    for (const auto& c : suite.cases) {
        ++cells[cell_name(c.tags.r_level, c.tags.v_level)];
    }
    EXPECT_EQ(cells, (std::map<std::string, int>{{"R0V0", 5}, {"R2V2", 3}}));
}

TEST(GenSuite, AllZeroCountsRejected) {
    EXPECT_THROW(gen_suite(SuiteConfig{}), ValidationError);
    auto cfg = SuiteConfig::uniform("s", 1, {"nowhere"}, 0);
    EXPECT_THROW(gen_suite(cfg), ValidationError);
}

TEST(GenSuite, TwoDomainsOneTagEach) {
    const auto suite = gen_suite(SuiteConfig::uniform("mix", 6, {"gazette", "ledger"}, 9));
    std::map<std::string, int> per_domain;
    for (const auto& c : suite.cases) {
        ++per_domain[c.tags.domain];
    }
    EXPECT_EQ(per_domain.size(), 2u);
    EXPECT_EQ(per_domain["gazette"], 27);
    EXPECT_EQ(per_domain["ledger"], 27);
}

TEST(GenSuite, SplitIsDisjointByDocSeed) {
    const auto suite = gen_suite(SuiteConfig::uniform("s", 10, {"gazette"}, 1));
    EXPECT_EQ(suite.eval_ids.size(), 18u);
    EXPECT_EQ(suite.train_ids.size(), 72u);
    const auto train = suite.doc_seeds(suite.train_ids);
    const auto eval = suite.doc_seeds(suite.eval_ids);
    for (auto s : eval) {
        EXPECT_EQ(train.count(s), 0u);
    }
    // every cell keeps its 80/20 split
    std::map<std::string, int> eval_cells;
    for (const auto& c : suite.eval_cases()) {
        ++eval_cells[cell_name(c.tags.r_level, c.tags.v_level)];
    }
    for (const auto& [cell, n] : eval_cells) {
        EXPECT_EQ(n, 2) << cell;
    }
}

TEST(GenSuite, SuitesSharingASeedSetStayDisjoint) {
    std::set<std::uint64_t> taken;
    const auto a = gen_suite(SuiteConfig::uniform("base", 10, {"gazette"}, 1), &taken);
    const auto b = gen_suite(SuiteConfig::uniform("target", 10, {"ledger"}, 1), &taken);
    const auto sa = a.doc_seeds(a.train_ids);
    for (const auto& c : b.cases) {
        EXPECT_EQ(sa.count(c.doc_seed), 0u);
    }
    EXPECT_EQ(taken.size(), a.cases.size() + b.cases.size());
}

TEST(GenSuite, DeterministicAndFitsContext) {
    const auto cfg = SuiteConfig::uniform("s", 30, {"gazette", "ledger", "chartnote"}, 77);
    const auto a = gen_suite(cfg);
    const auto b = gen_suite(cfg);
    EXPECT_EQ(a.to_ndjson(), b.to_ndjson());
    EXPECT_EQ(a.train_ids, b.train_ids);
    for (const auto& c : a.cases) {
        ASSERT_LE(case_tokens(c), 96u) << c.prompt;
        ASSERT_TRUE(vocab::encodable(c.prompt + c.ground_truth));
        if (c.tags.r_level != RLevel::R2) {
            ASSERT_FALSE(c.ground_truth.empty());
        }
    }
}

TEST(SuiteFiles, RoundTripAndTamperDetection) {
    const auto suite = gen_suite(SuiteConfig::uniform("io", 3, {"chartnote"}, 4));
    const auto dir = std::filesystem::temp_directory_path() / "lwaft_suite_io";
    std::filesystem::create_directories(dir);
    save_suite(suite, dir / "s.ndjson", dir / "s.manifest.json");
    const auto back = load_suite(dir / "s.ndjson", dir / "s.manifest.json");
    EXPECT_EQ(back.cases, suite.cases);
    EXPECT_EQ(back.train_ids, suite.train_ids);
    EXPECT_EQ(back.eval_ids, suite.eval_ids);
    EXPECT_EQ(back.config.to_json(), suite.config.to_json());
    auto text = read_file_text(dir / "s.ndjson");
    text[text.find("ground_truth") + 16] ^= 1;
    write_file_text(dir / "s.ndjson", text);
    EXPECT_THROW(load_suite(dir / "s.ndjson", dir / "s.manifest.json"), ValidationError);
    std::filesystem::remove_all(dir);
}
