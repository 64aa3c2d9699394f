#include <doctest.h>

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "toklip/synthdata.hpp"

using namespace toklip;
using namespace toklip::synth;

namespace {

// Independent color oracle: classify each pixel to the nearest entry of the
// combined palette and count foreground hits.
int dominant_foreground_color(const CaptionedImage& img) {
    std::vector<std::pair<std::array<float, 3>, int>> palette;
    for (size_t c = 0; c < foreground_colors().size(); c++)
        palette.push_back({foreground_colors()[c].rgb, static_cast<int>(c)});
    for (const auto& bg : background_colors()) palette.push_back({bg.rgb, -1});
    std::vector<int> counts(foreground_colors().size(), 0);
    for (int p = 0; p < kImageSize * kImageSize; p++) {
        float r = img.pixels[static_cast<size_t>(p) * 3];
        float g = img.pixels[static_cast<size_t>(p) * 3 + 1];
        float b = img.pixels[static_cast<size_t>(p) * 3 + 2];
        int best = -1;
        float best_d = 1e9f;
        for (const auto& [rgb, id] : palette) {
            float d = (r - rgb[0]) * (r - rgb[0]) + (g - rgb[1]) * (g - rgb[1]) + (b - rgb[2]) * (b - rgb[2]);
            if (d < best_d) {
                best_d = d;
                best = id;
            }
        }
        if (best >= 0) counts[static_cast<size_t>(best)]++;
    }
    int arg = 0;
    for (size_t c = 1; c < counts.size(); c++)
        if (counts[c] > counts[static_cast<size_t>(arg)]) arg = static_cast<int>(c);
    return arg;
}

}  // namespace

TEST_SUITE("synthdata") {

TEST_CASE("render is deterministic in (seed, index)") {
    for (uint64_t i : {0ull, 7ull, 123ull}) {
        CaptionedImage a = render_sample(0, i);
        CaptionedImage b = render_sample(0, i);
        CHECK(a.pixels == b.pixels);
        CHECK(a.caption_text == b.caption_text);
    }
    CHECK(render_sample(0, 5).pixels != render_sample(1, 5).pixels);
}

TEST_CASE("foreground color histogram matches the caption color word") {
    for (uint64_t i = 0; i < 64; i++) {
        CaptionedImage img = render_sample(3, i);
        int color = dominant_foreground_color(img);
        CHECK(color == img.class_id % kNumColors);
        CHECK(img.caption_text.find(foreground_colors()[static_cast<size_t>(color)].name) !=
              std::string::npos);
    }
}

TEST_CASE("class id encodes shape and color") {
    CaptionedImage img = render_sample(0, 0);  // index 0 -> circle, red
    CHECK(img.class_id == 0);
    CHECK(img.caption_text.find("red circle") != std::string::npos);
    for (uint64_t i = 0; i < 32; i++) {
        CaptionedImage s = render_sample(0, i);
        int shape = s.class_id / kNumColors;
        int color = s.class_id % kNumColors;
        CHECK(s.class_id == shape * 4 + color);
        CHECK(s.caption_text == caption_for(s.class_id, s.bg_id));
    }
    for (float p : render_sample(9, 100).pixels) {
        CHECK(p >= 0.0f);
        CHECK(p <= 1.0f);
    }
}

TEST_CASE("dataset class balance, triple coverage, byte-identical files") {
    Dataset ds = build_dataset(0, 1600, 400);
    std::vector<int> counts(kNumClasses, 0);
    for (const auto& s : ds.train) counts[static_cast<size_t>(s.class_id)]++;
    for (int c : counts) CHECK(std::abs(c - 100) <= 3);

    std::set<std::pair<int, int>> train_triples, test_triples;
    for (const auto& s : ds.train) train_triples.insert({s.class_id, s.bg_id});
    for (const auto& s : ds.test) test_triples.insert({s.class_id, s.bg_id});
    CHECK(train_triples.size() == 64);
    CHECK(test_triples.size() == 64);

    std::string dir_a = "/tmp/toklip_test_ds_a", dir_b = "/tmp/toklip_test_ds_b";
    save_dataset(ds, dir_a);
    save_dataset(build_dataset(0, 1600, 400), dir_b);
    for (const char* name : {"/train.tkds", "/test.tkds", "/vocab.txt"}) {
        std::ifstream fa(dir_a + name, std::ios::binary), fb(dir_b + name, std::ios::binary);
        std::string sa((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
        std::string sb((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
        CHECK(sa == sb);
        CHECK(!sa.empty());
    }
    Dataset loaded = load_dataset(dir_a);
    CHECK(loaded.train.size() == ds.train.size());
    CHECK(loaded.train[17].pixels == ds.train[17].pixels);
    CHECK(loaded.train[17].caption_text == ds.train[17].caption_text);
    CHECK(loaded.test[3].class_id == ds.test[3].class_id);
    std::filesystem::remove_all(dir_a);
    std::filesystem::remove_all(dir_b);

    CHECK_THROWS_AS(build_dataset(0, 0, 10), ValueError);
}

TEST_CASE("caption round trip and unknown words") {
    TextVocab vocab = TextVocab::standard();
    std::string text = "a red circle on a blue background";
    std::vector<int> ids = vocab.encode(text);
    CHECK(ids.size() == 7);
    CHECK(vocab.decode(ids) == text);
    CHECK(vocab.encode("").empty());
    CHECK_THROWS_AS(vocab.encode("a red hexagon"), ValueError);

    CHECK(vocab.id("[PAD]") == 0);
    CHECK(vocab.id("[BOS]") == 1);
    CHECK(vocab.id("[EOS]") == 2);
    CHECK(vocab.id("[BOI]") == 3);
    CHECK(vocab.id("[EOI]") == 4);
    CHECK(vocab.id("[C0]") == TextVocab::kFirstClassToken);
    CHECK(vocab.id("[C15]") == TextVocab::kFirstClassToken + 15);

    std::string path = "/tmp/toklip_test_vocab.txt";
    vocab.save(path);
    TextVocab loaded = TextVocab::load(path);
    CHECK(loaded.size() == vocab.size());
    for (int i = 0; i < vocab.size(); i++) CHECK(loaded.word(i) == vocab.word(i));
    std::filesystem::remove(path);
}

TEST_CASE("captions are unique per (shape,color,bg) triple") {
    std::set<std::string> captions;
    for (int cls = 0; cls < kNumClasses; cls++)
        for (int bg = 0; bg < kNumBackgrounds; bg++) captions.insert(caption_for(cls, bg));
    CHECK(captions.size() == 64);
    std::set<std::string> prompts;
    for (int cls = 0; cls < kNumClasses; cls++) prompts.insert(class_prompt(cls));
    CHECK(prompts.size() == 16);
}

}  // TEST_SUITE
