#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "toklip/common.hpp"

namespace toklip {
namespace synth {

constexpr int kImageSize = 32;
constexpr int kChannels = 3;
constexpr int kPixels = kImageSize * kImageSize * kChannels;
constexpr int kNumShapes = 4;
constexpr int kNumColors = 4;
constexpr int kNumBackgrounds = 4;
constexpr int kNumClasses = kNumShapes * kNumColors;

struct Palette {
    std::string name;
    std::array<float, 3> rgb;
};

const std::vector<std::string>& shape_names();
const std::vector<Palette>& foreground_colors();
const std::vector<Palette>& background_colors();

struct CaptionedImage {
    std::vector<float> pixels;        // 32x32x3 row-major HWC, values in [0,1]
    std::vector<int> caption_tokens;  // content word ids (no specials)
    int class_id = 0;                 // shape_index*4 + color_index
    int bg_id = 0;
    std::string caption_text;
};

// Word-level tokenizer. Specials occupy the lowest ids, then the 16 class
// tokens, then the caption words; ids are dense from 0.
class TextVocab {
  public:
    static constexpr int kPad = 0;
    static constexpr int kBos = 1;
    static constexpr int kEos = 2;
    static constexpr int kBoi = 3;
    static constexpr int kEoi = 4;
    static constexpr int kFirstClassToken = 5;

    static TextVocab standard();

    int size() const { return static_cast<int>(words_.size()); }
    int id(const std::string& word) const;
    const std::string& word(int id) const;
    int class_token(int class_id) const { return kFirstClassToken + class_id; }

    std::vector<int> encode(const std::string& text) const;
    std::string decode(const std::vector<int>& ids) const;

    void save(const std::string& path) const;
    static TextVocab load(const std::string& path);

  private:
    std::vector<std::string> words_;
    std::unordered_map<std::string, int> index_;
    void push(const std::string& w);
};

// Deterministic in (seed, index): class cycles index % 16, background cycles
// (index / 16) % 4, and position/scale jitter comes from the per-index
// sub-stream. No global state anywhere.
CaptionedImage render_sample(uint64_t seed, uint64_t index);

std::string caption_for(int class_id, int bg_id);
std::string class_prompt(int class_id);  // caption with the background dropped

struct Dataset {
    std::vector<CaptionedImage> train;
    std::vector<CaptionedImage> test;
};

Dataset build_dataset(uint64_t seed, int n_train, int n_test);

// Binary dataset file: "TKDS" magic, version, counts, dims, then per-sample
// records (f32 LE pixels, u16 caption length + ids, u16 class, u16 bg).
void save_dataset(const Dataset& ds, const std::string& dir);
Dataset load_dataset(const std::string& dir);

}  // namespace synth
}  // namespace toklip
