#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "support.hpp"

using namespace diffreg;
using testing_support::make_dataset;
using testing_support::make_sample;

namespace {

std::string csv_of(const Dataset& ds) {
    std::ostringstream out;
    write_dataset_csv(ds, out);
    return out.str();
}

std::string error_message(const std::string& text) {
    try {
        parse_dataset_csv(text);
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::parse);
        return e.what();
    }
    ADD_FAILURE() << "expected a parse error";
    return {};
}

std::set<std::string> subjects(const Dataset& ds) {
    std::set<std::string> out;
    for (const auto& s : ds.samples) {
        out.insert(s.subject_id);
    }
    return out;
}

} // namespace

TEST(Synthetic, ZeroNoiseSameLabelSameSubjectGivesIdenticalFeatures) {
    SynthConfig sc;
    sc.num_subjects = 1;
    sc.noise_sigma = 0.0;
    sc.seed = 3;
    // One subject and no noise: features are a function of the label alone, so equal
    // labels must give identical vectors.
    sc.samples_per_subject = 400;
    const auto ds = generate_synthetic(sc);
    std::map<double, std::vector<double>> by_label;
    std::size_t collisions = 0;
    for (const auto& s : ds.samples) {
        auto [it, inserted] = by_label.emplace(s.label, s.features);
        if (!inserted) {
            EXPECT_EQ(it->second, s.features);
            ++collisions;
        }
    }
    EXPECT_GT(collisions, 0u);
}

TEST(Synthetic, SameSeedIsByteIdentical) {
    SynthConfig sc = testing_support::small_synth(11);
    EXPECT_EQ(csv_of(generate_synthetic(sc)), csv_of(generate_synthetic(sc)));
    sc.seed = 12;
    EXPECT_NE(csv_of(generate_synthetic(testing_support::small_synth(11))), csv_of(generate_synthetic(sc)));
}

TEST(Synthetic, CountsSubjectsTimesSamples) {
    SynthConfig sc;
    sc.num_subjects = 500;
    sc.samples_per_subject = 4;
    const auto ds = generate_synthetic(sc);
    EXPECT_EQ(ds.size(), 2000u);
    EXPECT_EQ(subjects(ds).size(), 500u);
    EXPECT_NO_THROW(ds.validate());
}

TEST(Synthetic, LabelsAreSkewedTowardTheLowerRange) {
    SynthConfig sc;
    sc.seed = 5;
    const auto ds = generate_synthetic(sc);
    const double mid = 0.5 * (sc.label_min + sc.label_max);
    std::size_t lower = 0;
    for (const auto& s : ds.samples) {
        EXPECT_GE(label_bucket(s.label), sc.label_min);
        EXPECT_LE(label_bucket(s.label), sc.label_max);
        lower += s.label < mid ? 1 : 0;
    }
    EXPECT_GT(lower, ds.size() / 2);
}

TEST(Synthetic, GroupsAreAssignedPerSubjectWithWeights) {
    SynthConfig sc;
    sc.seed = 9;
    sc.groups.push_back({"gender", {"male", "female"}, {0.5, -0.5}, {0.8, 0.2}});
    const auto ds = generate_synthetic(sc);
    std::map<std::string, std::string> subject_group;
    std::size_t male_subjects = 0;
    for (const auto& s : ds.samples) {
        auto [it, inserted] = subject_group.emplace(s.subject_id, s.groups.at("gender"));
        EXPECT_EQ(it->second, s.groups.at("gender"));
        if (inserted && it->second == "male") {
            ++male_subjects;
        }
    }
    const double frac = static_cast<double>(male_subjects) / static_cast<double>(subject_group.size());
    EXPECT_NEAR(frac, 0.8, 0.06);
}

TEST(Synthetic, InvalidConfigIsAConfigError) {
    SynthConfig sc;
    sc.label_min = 50;
    sc.label_max = 40;
    try {
        generate_synthetic(sc);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::config);
    }
    sc = SynthConfig{};
    sc.num_subjects = 0;
    EXPECT_THROW(generate_synthetic(sc), Error);
    sc = SynthConfig{};
    sc.noise_sigma = -1.0;
    EXPECT_THROW(generate_synthetic(sc), Error);
}

TEST(DatasetCsv, RoundTripOfThreeSamples) {
    auto ds = make_dataset({make_sample("a", "p1", 30.25, {0.1, -2.5}, {{"g", "x"}}),
                            make_sample("b", "p1", 31.0, {1e-300, 3.0}, {{"g", "y"}}),
                            make_sample("c", "p2", 29.5, {0.30000000000000004, 7.0}, {{"g", "x"}})},
                           29, 31);
    const auto text = csv_of(ds);
    const auto back = parse_dataset_csv(text);
    EXPECT_EQ(back.samples, ds.samples);
    EXPECT_EQ(back.feature_dim, 2u);
    EXPECT_EQ(csv_of(back), text);
}

TEST(DatasetCsv, SaveSortsBySampleIdAndFileRoundTrips) {
    const auto dir = std::filesystem::temp_directory_path() / "diffreg_ds_test";
    std::filesystem::create_directories(dir);
    const auto path = (dir / "d.csv").string();
    auto ds = generate_synthetic(testing_support::small_synth(4, 10));
    std::reverse(ds.samples.begin(), ds.samples.end());
    save_dataset(ds, path);
    const auto back = load_dataset(path);
    ASSERT_EQ(back.size(), ds.size());
    EXPECT_TRUE(std::is_sorted(back.samples.begin(), back.samples.end(),
                               [](const Sample& a, const Sample& b) { return a.sample_id < b.sample_id; }));
    std::reverse(ds.samples.begin(), ds.samples.end());
    EXPECT_EQ(back.samples, ds.samples);
}

TEST(DatasetCsv, HeaderLayout) {
    auto ds = make_dataset({make_sample("a", "p", 1.0, {0.5, 1.5}, {{"site", "n"}})}, 0, 2);
    const auto text = csv_of(ds);
    EXPECT_EQ(text.substr(0, text.find('\n')), "sample_id,subject_id,label,group:site,f0,f1");
}

TEST(DatasetCsv, RaggedRowNamesTheRow) {
    const std::string text = "sample_id,subject_id,label,f0,f1\n"
                             "a,p,30,1,2\n"
                             "b,p,31,1\n";
    const auto msg = error_message(text);
    EXPECT_NE(msg.find("row 2"), std::string::npos) << msg;
}

TEST(DatasetCsv, NonNumericFeatureNamesTheRow) {
    const std::string text = "sample_id,subject_id,label,f0\n"
                             "a,p,30,1\n"
                             "b,p,31,1\n"
                             "c,p,31,abc\n";
    const auto msg = error_message(text);
    EXPECT_NE(msg.find("row 3"), std::string::npos) << msg;
}

TEST(DatasetCsv, EmptyFileIsAParseError) {
    EXPECT_NE(error_message("").find("empty"), std::string::npos);
    error_message("sample_id,subject_id,label,f0\n");
    error_message("id,subject,label,f0\na,p,1,2\n");
}

TEST(DatasetCsv, DuplicateIdsAreRejected) {
    error_message("sample_id,subject_id,label,f0\na,p,1,2\na,q,1,2\n");
}

TEST(Split, HundredSubjectsApproximateFractionsAndAreDisjoint) {
    SynthConfig sc;
    sc.num_subjects = 100;
    sc.seed = 2;
    const auto ds = generate_synthetic(sc);
    const auto sp = subject_exclusive_split(ds, 0.78, 0.02, 17);
    const auto tr = subjects(sp.train);
    const auto di = subjects(sp.dist);
    const auto te = subjects(sp.test);
    EXPECT_NEAR(static_cast<double>(tr.size()), 78.0, 1.0);
    EXPECT_NEAR(static_cast<double>(di.size()), 2.0, 1.0);
    EXPECT_NEAR(static_cast<double>(te.size()), 20.0, 1.0);
    EXPECT_EQ(tr.size() + di.size() + te.size(), 100u);
    EXPECT_EQ(sp.train.size() + sp.dist.size() + sp.test.size(), ds.size());
    for (const auto* a : {&tr, &di, &te}) {
        for (const auto* b : {&tr, &di, &te}) {
            if (a == b) {
                continue;
            }
            for (const auto& s : *a) {
                EXPECT_EQ(b->count(s), 0u);
            }
        }
    }
}

TEST(Split, ExhaustiveDisjointnessOverSeeds) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        auto sc = testing_support::small_synth(seed, 3 + static_cast<int>(seed));
        const auto ds = generate_synthetic(sc);
        const auto sp = subject_exclusive_split(ds, 0.6, 0.1, seed);
        std::map<std::string, int> owner;
        int k = 0;
        for (const auto* part : {&sp.train, &sp.dist, &sp.test}) {
            for (const auto& s : part->samples) {
                auto [it, inserted] = owner.emplace(s.subject_id, k);
                EXPECT_EQ(it->second, k) << "subject " << s.subject_id << " in two partitions";
            }
            ++k;
        }
        EXPECT_FALSE(sp.train.empty());
        EXPECT_FALSE(sp.dist.empty());
        EXPECT_FALSE(sp.test.empty());
    }
}

TEST(Split, DeterministicGivenSeed) {
    const auto ds = generate_synthetic(testing_support::small_synth(1));
    const auto a = subject_exclusive_split(ds, 0.78, 0.02, 5);
    const auto b = subject_exclusive_split(ds, 0.78, 0.02, 5);
    EXPECT_EQ(a.train, b.train);
    EXPECT_EQ(a.dist, b.dist);
    EXPECT_EQ(a.test, b.test);
}

TEST(Split, TooFewSubjectsAndBadFractions) {
    auto ds = make_dataset({make_sample("a", "p1", 1, {0}), make_sample("b", "p2", 1, {0})}, 0, 2);
    EXPECT_THROW(subject_exclusive_split(ds, 0.5, 0.2, 0), Error);
    const auto big = generate_synthetic(testing_support::small_synth(1));
    EXPECT_THROW(subject_exclusive_split(big, 0.9, 0.2, 0), Error);
    EXPECT_THROW(subject_exclusive_split(big, 0.0, 0.2, 0), Error);
}
