#pragma once

#include <filesystem>
#include <string>

#include "forgetdissect/nets.hpp"
#include "forgetdissect/random.hpp"
#include "forgetdissect/synthdata.hpp"

namespace testutil {

namespace fd = forgetdissect;
namespace fs = std::filesystem;

/// Fresh empty directory below the system temp dir.
inline fs::path scratch_dir(const std::string& name) {
    const auto dir = fs::temp_directory_path() / ("forgetdissect_test_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

inline fd::Image random_image(fd::Rng& rng, int h, int w, int c = 3) {
    fd::Image img(h, w, c);
    for (auto& v : img.data) v = static_cast<float>(rng.uniform());
    return img;
}

/// Two conv blocks on 8x8 inputs with a tiny decoder.
inline fd::nets::ModelConfig micro_config(int vocab_size = 9, bool bias = true) {
    fd::nets::ModelConfig c;
    c.input_size = 8;
    c.blocks = {{1, {{3, 3, fd::nets::Activation::Relu, true}}}, {2, {{4, 3, fd::nets::Activation::Relu, true}}}};
    c.use_bias = bias;
    c.decoder = {5, 6, vocab_size, 6};
    return c;
}

/// Small but complete dataset: 16x16 images, 8 classes.
inline fd::synthdata::DatasetConfig small_dataset_config(int per_class = 10) {
    fd::synthdata::DatasetConfig c;
    c.image_size = 16;
    c.samples_per_class = per_class;
    return c;
}

}  // namespace testutil
