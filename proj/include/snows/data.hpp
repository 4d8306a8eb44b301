#pragma once

#include <fstream>

#include "snows/netgraph.hpp"

namespace snows {

template <typename S>
struct Dataset {
    Tensor<S> features;       // (N, C, H, W) or (N, d) or (N, seq, d)
    std::vector<int> labels;  // size N
    int num_classes = 0;

    index_t size() const { return features.dim(0); }
};

// Raw binary record format: per record one label byte followed by a
// fixed-size feature block of unsigned bytes (row-major over feature_shape),
// scaled to [0,1] on load. CIFAR-style binaries (1 + 3072 bytes per record,
// channel-major planes) parse directly with feature_shape {3,32,32}.
template <typename S>
Dataset<S> load_raw_dataset(const std::string& path, const Shape& feature_shape, int num_classes,
                            index_t max_records = 0) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open dataset '" + path + "'");
    const index_t block = shape_numel(feature_shape);
    std::vector<unsigned char> rec(static_cast<std::size_t>(block) + 1);

    std::vector<S> feat;
    std::vector<int> labels;
    while (max_records == 0 || static_cast<index_t>(labels.size()) < max_records) {
        in.read(reinterpret_cast<char*>(rec.data()), static_cast<std::streamsize>(rec.size()));
        if (in.gcount() == 0 && in.eof()) break;
        if (in.gcount() != static_cast<std::streamsize>(rec.size()))
            throw IoError("truncated record " + std::to_string(labels.size()) + " in '" + path + "'");
        labels.push_back(rec[0]);
        for (index_t i = 0; i < block; ++i)
            feat.push_back(static_cast<S>(rec[static_cast<std::size_t>(i) + 1]) / S(255));
    }
    if (labels.empty()) throw IoError("dataset '" + path + "' holds no records");

    Dataset<S> ds;
    Shape full = feature_shape;
    full.insert(full.begin(), static_cast<index_t>(labels.size()));
    ds.features = Tensor<S>(full, std::move(feat));
    ds.labels = std::move(labels);
    ds.num_classes = num_classes;
    for (int l : ds.labels)
        if (l >= ds.num_classes)
            throw ValueError("label " + std::to_string(l) + " outside declared " + std::to_string(num_classes) +
                             " classes in '" + path + "'");
    return ds;
}

// Synthetic balanced classification data: class means drawn N(0,1) per
// coordinate from the "means" sub-stream, samples mean + noise*N(0,1) from
// the "noise" sub-stream. Labels cycle 0..classes-1. Fully keyed by seed.
template <typename S>
Dataset<S> make_synthetic_gaussian(index_t n, const Shape& feature_shape, int classes, Rng rng,
                                   double noise = 1.0) {
    if (n <= 0 || classes <= 0) throw ValueError("synthetic dataset needs n > 0 and classes > 0");
    const index_t d = shape_numel(feature_shape);
    Rng means_rng = rng.substream("means");
    Rng noise_rng = rng.substream("noise");

    std::vector<double> means(static_cast<std::size_t>(classes) * static_cast<std::size_t>(d));
    for (auto& v : means) v = means_rng.normal();

    Dataset<S> ds;
    ds.num_classes = classes;
    Shape full = feature_shape;
    full.insert(full.begin(), n);
    ds.features = Tensor<S>(full);
    ds.labels.resize(static_cast<std::size_t>(n));
    for (index_t i = 0; i < n; ++i) {
        const int c = static_cast<int>(i % classes);
        ds.labels[static_cast<std::size_t>(i)] = c;
        for (index_t j = 0; j < d; ++j)
            ds.features[i * d + j] =
                static_cast<S>(means[static_cast<std::size_t>(c) * static_cast<std::size_t>(d) +
                                     static_cast<std::size_t>(j)] +
                               noise * noise_rng.normal());
    }
    return ds;
}

// Top-1 accuracy with argmax over the network's final output (works on
// logits or softmax outputs alike). Evaluates in chunks to bound memory.
template <typename S>
double accuracy(const NetworkGraph<S>& g, const Dataset<S>& ds, index_t chunk = 256) {
    index_t correct = 0;
    for (index_t row = 0; row < ds.size(); row += chunk) {
        const index_t n = std::min(chunk, ds.size() - row);
        Tensor<S> out = forward(g, slice_dim0(ds.features, row, n));
        const index_t classes = out.shape().back();
        for (index_t i = 0; i < n; ++i) {
            index_t best = 0;
            for (index_t c = 1; c < classes; ++c)
                if (out[i * classes + best] < out[i * classes + c]) best = c;
            if (static_cast<int>(best) == ds.labels[static_cast<std::size_t>(row + i)]) ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(ds.size());
}

}  // namespace snows
