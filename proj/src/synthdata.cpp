#include "toklip/synthdata.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "toklip/rng.hpp"

namespace toklip {
namespace synth {

const std::vector<std::string>& shape_names() {
    static const std::vector<std::string> v = {"circle", "square", "triangle", "cross"};
    return v;
}

const std::vector<Palette>& foreground_colors() {
    static const std::vector<Palette> v = {
        {"red", {1.0f, 0.1f, 0.1f}},
        {"green", {0.1f, 0.8f, 0.1f}},
        {"blue", {0.15f, 0.25f, 1.0f}},
        {"yellow", {1.0f, 0.9f, 0.1f}},
    };
    return v;
}

const std::vector<Palette>& background_colors() {
    static const std::vector<Palette> v = {
        {"white", {0.95f, 0.95f, 0.95f}},
        {"black", {0.05f, 0.05f, 0.05f}},
        {"gray", {0.5f, 0.5f, 0.5f}},
        {"purple", {0.55f, 0.15f, 0.65f}},
    };
    return v;
}

// ---------------------------------------------------------------------------
// Vocab
// ---------------------------------------------------------------------------

void TextVocab::push(const std::string& w) {
    index_[w] = static_cast<int>(words_.size());
    words_.push_back(w);
}

TextVocab TextVocab::standard() {
    TextVocab v;
    v.push("[PAD]");
    v.push("[BOS]");
    v.push("[EOS]");
    v.push("[BOI]");
    v.push("[EOI]");
    for (int c = 0; c < kNumClasses; c++) v.push("[C" + std::to_string(c) + "]");
    v.push("a");
    v.push("on");
    v.push("background");
    for (const auto& p : foreground_colors()) v.push(p.name);
    for (const auto& s : shape_names()) v.push(s);
    for (const auto& p : background_colors()) v.push(p.name);
    return v;
}

int TextVocab::id(const std::string& word) const {
    auto it = index_.find(word);
    require(it != index_.end(), "vocab: unknown word '" + word + "'");
    return it->second;
}

const std::string& TextVocab::word(int id) const {
    require(id >= 0 && id < size(), "vocab: id out of range");
    return words_[static_cast<size_t>(id)];
}

std::vector<int> TextVocab::encode(const std::string& text) const {
    std::vector<int> ids;
    std::istringstream iss(text);
    std::string w;
    while (iss >> w) ids.push_back(id(w));
    return ids;
}

std::string TextVocab::decode(const std::vector<int>& ids) const {
    std::string out;
    for (size_t i = 0; i < ids.size(); i++) {
        if (i) out += ' ';
        out += word(ids[i]);
    }
    return out;
}

void TextVocab::save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    require(f.good(), "vocab: cannot open for writing: " + path);
    for (const auto& w : words_) f << w << '\n';
}

TextVocab TextVocab::load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    require(f.good(), "vocab: cannot open: " + path);
    TextVocab v;
    std::string line;
    while (std::getline(f, line)) {
        if (!line.empty()) v.push(line);
    }
    return v;
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

std::string caption_for(int class_id, int bg_id) {
    int shape = class_id / kNumColors;
    int color = class_id % kNumColors;
    return "a " + foreground_colors()[static_cast<size_t>(color)].name + " " +
           shape_names()[static_cast<size_t>(shape)] + " on a " +
           background_colors()[static_cast<size_t>(bg_id)].name + " background";
}

std::string class_prompt(int class_id) {
    int shape = class_id / kNumColors;
    int color = class_id % kNumColors;
    return "a " + foreground_colors()[static_cast<size_t>(color)].name + " " +
           shape_names()[static_cast<size_t>(shape)];
}

namespace {

bool inside_shape(int shape, float dx, float dy, float r) {
    switch (shape) {
        case 0:  // circle
            return dx * dx + dy * dy <= r * r;
        case 1:  // square
            return std::max(std::abs(dx), std::abs(dy)) <= 0.8f * r;
        case 2: {  // upward triangle: apex at dy=-r, base at dy=+0.8r
            if (dy < -r || dy > 0.8f * r) return false;
            float half_width = 0.95f * r * (dy + r) / (1.8f * r);
            return std::abs(dx) <= half_width;
        }
        case 3:  // cross
            return (std::abs(dx) <= 0.33f * r && std::abs(dy) <= r) ||
                   (std::abs(dy) <= 0.33f * r && std::abs(dx) <= r);
        default:
            throw ValueError("render: bad shape index");
    }
}

}  // namespace

CaptionedImage render_sample(uint64_t seed, uint64_t index) {
    Rng rng = Rng::substream(seed, "data/render").derive(index);

    int class_id = static_cast<int>(index % kNumClasses);
    int shape = class_id / kNumColors;
    int color = class_id % kNumColors;
    int bg = static_cast<int>((index / kNumClasses) % kNumBackgrounds);

    float cx = 16.0f + static_cast<float>(rng.next_uniform(-4.0, 4.0));
    float cy = 16.0f + static_cast<float>(rng.next_uniform(-4.0, 4.0));
    float r = 9.0f * static_cast<float>(rng.next_uniform(0.75, 1.25));

    const auto& fg_rgb = foreground_colors()[static_cast<size_t>(color)].rgb;
    const auto& bg_rgb = background_colors()[static_cast<size_t>(bg)].rgb;

    CaptionedImage img;
    img.pixels.resize(kPixels);
    for (int y = 0; y < kImageSize; y++) {
        for (int x = 0; x < kImageSize; x++) {
            float dx = static_cast<float>(x) + 0.5f - cx;
            float dy = static_cast<float>(y) + 0.5f - cy;
            const auto& rgb = inside_shape(shape, dx, dy, r) ? fg_rgb : bg_rgb;
            size_t base = (static_cast<size_t>(y) * kImageSize + x) * kChannels;
            img.pixels[base + 0] = rgb[0];
            img.pixels[base + 1] = rgb[1];
            img.pixels[base + 2] = rgb[2];
        }
    }
    img.class_id = class_id;
    img.bg_id = bg;
    img.caption_text = caption_for(class_id, bg);
    img.caption_tokens = TextVocab::standard().encode(img.caption_text);
    return img;
}

Dataset build_dataset(uint64_t seed, int n_train, int n_test) {
    require(n_train > 0 && n_test > 0, "build_dataset: counts must be positive");
    Dataset ds;
    ds.train.reserve(static_cast<size_t>(n_train));
    ds.test.reserve(static_cast<size_t>(n_test));
    for (int i = 0; i < n_train; i++) ds.train.push_back(render_sample(seed, static_cast<uint64_t>(i)));
    for (int i = 0; i < n_test; i++)
        ds.test.push_back(render_sample(seed, static_cast<uint64_t>(n_train + i)));
    return ds;
}

// ---------------------------------------------------------------------------
// Dataset file IO
// ---------------------------------------------------------------------------

namespace {

constexpr uint32_t kDatasetVersion = 1;

void write_u32(std::ofstream& f, uint32_t v) { f.write(reinterpret_cast<const char*>(&v), 4); }
void write_u16(std::ofstream& f, uint16_t v) { f.write(reinterpret_cast<const char*>(&v), 2); }
uint32_t read_u32(std::ifstream& f) {
    uint32_t v = 0;
    f.read(reinterpret_cast<char*>(&v), 4);
    return v;
}
uint16_t read_u16(std::ifstream& f) {
    uint16_t v = 0;
    f.read(reinterpret_cast<char*>(&v), 2);
    return v;
}

void write_split(const std::vector<CaptionedImage>& split, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    require(f.good(), "dataset: cannot open for writing: " + path);
    f.write("TKDS", 4);
    write_u32(f, kDatasetVersion);
    write_u32(f, static_cast<uint32_t>(split.size()));
    write_u32(f, kImageSize);
    write_u32(f, kImageSize);
    write_u32(f, kChannels);
    for (const auto& s : split) {
        f.write(reinterpret_cast<const char*>(s.pixels.data()),
                static_cast<std::streamsize>(s.pixels.size() * sizeof(float)));
        write_u16(f, static_cast<uint16_t>(s.caption_tokens.size()));
        for (int id : s.caption_tokens) write_u16(f, static_cast<uint16_t>(id));
        write_u16(f, static_cast<uint16_t>(s.class_id));
        write_u16(f, static_cast<uint16_t>(s.bg_id));
    }
    require(f.good(), "dataset: write failed: " + path);
}

std::vector<CaptionedImage> read_split(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    require(f.good(), "dataset: cannot open: " + path);
    char magic[4];
    f.read(magic, 4);
    require(std::memcmp(magic, "TKDS", 4) == 0, "dataset: bad magic in " + path);
    require(read_u32(f) == kDatasetVersion, "dataset: unsupported version in " + path);
    uint32_t count = read_u32(f);
    uint32_t h = read_u32(f), w = read_u32(f), c = read_u32(f);
    require(h == kImageSize && w == kImageSize && c == kChannels, "dataset: unexpected dims");
    std::vector<CaptionedImage> out(count);
    TextVocab vocab = TextVocab::standard();
    for (auto& s : out) {
        s.pixels.resize(kPixels);
        f.read(reinterpret_cast<char*>(s.pixels.data()),
               static_cast<std::streamsize>(s.pixels.size() * sizeof(float)));
        uint16_t len = read_u16(f);
        s.caption_tokens.resize(len);
        for (auto& id : s.caption_tokens) id = read_u16(f);
        s.class_id = read_u16(f);
        s.bg_id = read_u16(f);
        s.caption_text = vocab.decode(s.caption_tokens);
        require(f.good(), "dataset: truncated file " + path);
    }
    return out;
}

}  // namespace

void save_dataset(const Dataset& ds, const std::string& dir) {
    std::filesystem::create_directories(dir);
    write_split(ds.train, dir + "/train.tkds");
    write_split(ds.test, dir + "/test.tkds");
    TextVocab::standard().save(dir + "/vocab.txt");
}

Dataset load_dataset(const std::string& dir) {
    Dataset ds;
    ds.train = read_split(dir + "/train.tkds");
    ds.test = read_split(dir + "/test.tkds");
    return ds;
}

}  // namespace synth
}  // namespace toklip
