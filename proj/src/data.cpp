#include "gram/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include "gram/error.hpp"
#include "gram/rng.hpp"

namespace gram {

void Dataset::validate() const {
    if (channels == 0 || side == 0 || classes == 0) throw ConfigError("dataset: empty geometry");
    if (images.size() != size() * image_numel())
        throw DimError("dataset: image buffer holds " + std::to_string(images.size()) +
                       " values, labels imply " + std::to_string(size() * image_numel()));
    for (size_t i = 0; i < labels.size(); ++i)
        if (labels[i] < 0 || size_t(labels[i]) >= classes)
            throw FormatError("dataset: label " + std::to_string(labels[i]) + " at index " +
                              std::to_string(i) + " outside " + std::to_string(classes) +
                              " classes");
}

namespace {

constexpr size_t kCifarPixels = 3 * 32 * 32;

void decode_record(const uint8_t* rec, CifarVariant variant, const Normalization& norm,
                   size_t byte_offset, const std::string& path, Dataset& out) {
    const size_t label_bytes = variant == CifarVariant::c10 ? 1 : 2;
    // c100 records carry coarse then fine; we keep the fine label.
    const int label = rec[label_bytes - 1];
    const int limit = variant == CifarVariant::c10 ? 10 : 100;
    if (label >= limit)
        throw FormatError(path + ": label byte " + std::to_string(label) + " at offset " +
                          std::to_string(byte_offset + label_bytes - 1) + " exceeds " +
                          std::to_string(limit - 1));
    out.labels.push_back(label);
    const uint8_t* px = rec + label_bytes;
    for (size_t c = 0; c < 3; ++c) {
        const float inv = 1.0f / (255.0f * norm.stddev[c]);
        const float shift = norm.mean[c] / norm.stddev[c];
        for (size_t i = 0; i < 1024; ++i) out.images.push_back(float(px[c * 1024 + i]) * inv - shift);
    }
}

}  // namespace

Dataset load_cifar(const std::string& path, CifarVariant variant, size_t limit,
                   const Normalization& norm, size_t chunk_records) {
    if (chunk_records == 0) throw ConfigError("load_cifar: chunk_records must be positive");
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("load_cifar: cannot open " + path);

    const size_t record_bytes = (variant == CifarVariant::c10 ? 1 : 2) + kCifarPixels;
    Dataset out;
    out.classes = variant == CifarVariant::c10 ? 10 : 100;

    std::vector<uint8_t> buf(record_bytes * chunk_records);
    size_t file_offset = 0;
    while (limit == 0 || out.size() < limit) {
        in.read(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size()));
        const size_t got = size_t(in.gcount());
        if (got == 0) break;
        if (got % record_bytes != 0) {
            if (!in.eof()) throw IoError("load_cifar: read error in " + path);
            throw FormatError(path + ": truncated record at byte " +
                              std::to_string(file_offset + (got / record_bytes) * record_bytes) +
                              " (records are " + std::to_string(record_bytes) + " bytes)");
        }
        for (size_t r = 0; r < got / record_bytes; ++r) {
            if (limit != 0 && out.size() == limit) break;
            decode_record(buf.data() + r * record_bytes, variant, norm,
                          file_offset + r * record_bytes, path, out);
        }
        file_offset += got;
        if (got < buf.size()) break;
    }
    out.validate();
    return out;
}

Dataset load_cifar_files(const std::vector<std::string>& paths, CifarVariant variant, size_t limit,
                         const Normalization& norm) {
    if (paths.empty()) throw ConfigError("load_cifar_files: no input files");
    Dataset out;
    for (const auto& p : paths) {
        const size_t want = limit == 0 ? 0 : limit - out.size();
        if (limit != 0 && want == 0) break;
        Dataset part = load_cifar(p, variant, want, norm);
        if (out.labels.empty()) {
            out = std::move(part);
        } else {
            out.images.insert(out.images.end(), part.images.begin(), part.images.end());
            out.labels.insert(out.labels.end(), part.labels.begin(), part.labels.end());
        }
    }
    out.validate();
    return out;
}

Dataset synth_blobs(size_t classes, size_t per_class, size_t dim, uint64_t seed,
                    uint64_t index_offset) {
    if (classes < 2) throw ConfigError("synth_blobs: needs at least 2 classes");
    if (per_class == 0 || dim == 0) throw ConfigError("synth_blobs: empty dataset");

    Dataset out;
    out.classes = classes;
    // Square layout: mono if dim is a square, RGB if dim is 3 * square.
    auto side_of = [](size_t n) -> size_t {
        size_t s = size_t(std::lround(std::sqrt(double(n))));
        return s * s == n ? s : 0;
    };
    if (size_t s = side_of(dim); s != 0) {
        out.channels = 1;
        out.side = s;
    } else if (dim % 3 == 0 && (s = side_of(dim / 3)) != 0) {
        out.channels = 3;
        out.side = s;
    } else {
        throw ConfigError("synth_blobs: dim " + std::to_string(dim) +
                          " is not s*s or 3*s*s for any integer s");
    }

    out.images.reserve(classes * per_class * dim);
    size_t n = 0;
    for (size_t k = 0; k < classes; ++k)
        for (size_t i = 0; i < per_class; ++i, ++n) {
            Rng rng(mix_keys(seed, 0xb10b, index_offset + n));
            for (size_t d = 0; d < dim; ++d) out.images.push_back(float(rng.normal()) + float(k));
            out.labels.push_back(int(k));
        }
    out.validate();
    return out;
}

namespace {

// Direct 3->3 channel 3x3 convolution with zero padding, plain loops.
void mix3x3(const float* src, size_t side, const float* filt, float* dst) {
    for (size_t co = 0; co < 3; ++co)
        for (size_t y = 0; y < side; ++y)
            for (size_t x = 0; x < side; ++x) {
                float acc = 0;
                for (size_t ci = 0; ci < 3; ++ci)
                    for (size_t ky = 0; ky < 3; ++ky)
                        for (size_t kx = 0; kx < 3; ++kx) {
                            const long sy = long(y) + long(ky) - 1, sx = long(x) + long(kx) - 1;
                            if (sy < 0 || sx < 0 || sy >= long(side) || sx >= long(side)) continue;
                            acc += src[(ci * side + size_t(sy)) * side + size_t(sx)] *
                                   filt[((co * 3 + ci) * 3 + ky) * 3 + kx];
                        }
                dst[(co * side + y) * side + x] = acc;
            }
}

}  // namespace

Dataset synth_textures(size_t classes, size_t per_class, uint64_t seed, size_t side,
                       float mean_cue, uint64_t index_offset) {
    if (classes < 2) throw ConfigError("synth_textures: needs at least 2 classes");
    if (per_class == 0 || side < 4) throw ConfigError("synth_textures: degenerate geometry");

    Dataset out;
    out.classes = classes;
    out.channels = 3;
    out.side = side;

    // Per-class mixing filter and low-frequency offset pattern.
    const size_t fsize = 3 * 3 * 3 * 3;
    std::vector<float> filters(classes * fsize);
    std::vector<float> offsets(classes * 3 * side * side);
    for (size_t k = 0; k < classes; ++k) {
        Rng crng(mix_keys(seed, 0x7e7, k));
        const float fscale = 1.0f / std::sqrt(27.0f);
        for (size_t i = 0; i < fsize; ++i) filters[k * fsize + i] = float(crng.normal()) * fscale;
        for (size_t c = 0; c < 3; ++c) {
            const float dc = float(crng.normal()) * mean_cue;
            const double fy = double(crng.uniform_int(3)), fx = double(crng.uniform_int(3));
            const double phase = crng.uniform() * 6.283185307179586;
            for (size_t y = 0; y < side; ++y)
                for (size_t x = 0; x < side; ++x)
                    offsets[((k * 3 + c) * side + y) * side + x] =
                        dc + mean_cue * float(std::cos(6.283185307179586 *
                                                           (fy * double(y) + fx * double(x)) /
                                                           double(side) +
                                                       phase));
        }
    }

    const size_t numel = 3 * side * side;
    out.images.assign(classes * per_class * numel, 0.0f);
    std::vector<float> noise(numel);
    size_t n = 0;
    for (size_t k = 0; k < classes; ++k)
        for (size_t i = 0; i < per_class; ++i, ++n) {
            Rng irng(mix_keys(seed, 0x1347, index_offset + n));
            for (auto& v : noise) v = float(irng.normal());
            mix3x3(noise.data(), side, filters.data() + k * fsize, out.images.data() + n * numel);
            const float* off = offsets.data() + k * numel;
            for (size_t d = 0; d < numel; ++d) out.images[n * numel + d] += off[d];
            out.labels.push_back(int(k));
        }
    out.validate();
    return out;
}

void augment_with(const float* src, size_t channels, size_t side, size_t pad, size_t dy, size_t dx,
                  bool flip, float* dst) {
    if (dy > 2 * pad || dx > 2 * pad)
        throw ConfigError("augment_with: crop offset (" + std::to_string(dy) + "," +
                          std::to_string(dx) + ") exceeds 2*pad=" + std::to_string(2 * pad));
    for (size_t c = 0; c < channels; ++c)
        for (size_t y = 0; y < side; ++y)
            for (size_t x = 0; x < side; ++x) {
                const long sy = long(y) + long(dy) - long(pad);
                long sx = long(x) + long(dx) - long(pad);
                float v = 0.0f;
                if (sy >= 0 && sy < long(side) && sx >= 0 && sx < long(side)) {
                    if (flip) sx = long(side) - 1 - sx;
                    v = src[(c * side + size_t(sy)) * side + size_t(sx)];
                }
                dst[(c * side + y) * side + x] = v;
            }
}

void augment_keyed(const float* src, size_t channels, size_t side, uint64_t key, uint64_t index,
                   float* dst) {
    Rng rng(mix_keys(key, index));
    const size_t pad = 4;
    const size_t dy = size_t(rng.uniform_int(2 * pad + 1));
    const size_t dx = size_t(rng.uniform_int(2 * pad + 1));
    const bool flip = rng.bernoulli(0.5);
    augment_with(src, channels, side, pad, dy, dx, flip, dst);
}

TensorT<float> gather_batch(const Dataset& data, const std::vector<size_t>& indices, bool augment,
                            uint64_t aug_key) {
    if (indices.empty()) throw ConfigError("gather_batch: empty index list");
    const size_t numel = data.image_numel();
    auto batch = TensorT<float>::zeros({indices.size(), data.channels, data.side, data.side});
    for (size_t b = 0; b < indices.size(); ++b) {
        if (indices[b] >= data.size())
            throw DimError("gather_batch: index " + std::to_string(indices[b]) +
                           " outside dataset of " + std::to_string(data.size()));
        const float* src = data.images.data() + indices[b] * numel;
        float* dst = batch.data() + b * numel;
        if (augment)
            augment_keyed(src, data.channels, data.side, aug_key, indices[b], dst);
        else
            std::memcpy(dst, src, numel * sizeof(float));
    }
    return batch;
}

std::vector<size_t> epoch_permutation(size_t n, uint64_t seed, size_t epoch) {
    std::vector<size_t> perm(n);
    std::iota(perm.begin(), perm.end(), size_t(0));
    Rng rng(mix_keys(seed, epoch, 0x5461));
    for (size_t i = 0; i + 1 < n; ++i) {
        const size_t j = i + size_t(rng.uniform_int(n - i));
        std::swap(perm[i], perm[j]);
    }
    return perm;
}

namespace {

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace

std::string format_metrics(const std::vector<MetricRow>& rows) {
    std::string out = "epoch,split,loss_ce,loss_dec,top1,strength,rho,bound\n";
    for (const auto& r : rows) {
        out += std::to_string(r.epoch) + ',' + r.split + ',' + fmt_double(r.loss_ce) + ',' +
               fmt_double(r.loss_dec) + ',' + fmt_double(r.top1) + ',';
        if (r.has_diag)
            out += fmt_double(r.strength) + ',' + fmt_double(r.rho) + ',' + fmt_double(r.bound);
        else
            out += "nan,nan,nan";
        out += '\n';
    }
    return out;
}

void emit_metrics(const std::vector<MetricRow>& rows, const std::string& path) {
    write_text_file(path, format_metrics(rows));
}

std::vector<MetricRow> parse_metrics(const std::string& csv_text) {
    std::vector<MetricRow> rows;
    std::istringstream in(csv_text);
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
        if (first) {
            first = false;
            if (line.rfind("epoch,", 0) != 0)
                throw FormatError("metrics csv: unexpected header '" + line + "'");
            continue;
        }
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::istringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, ',')) cells.push_back(cell);
        if (cells.size() != 8)
            throw FormatError("metrics csv: row has " + std::to_string(cells.size()) +
                              " cells: '" + line + "'");
        MetricRow r;
        r.epoch = size_t(std::stoull(cells[0]));
        r.split = cells[1];
        r.loss_ce = std::stod(cells[2]);
        r.loss_dec = std::stod(cells[3]);
        r.top1 = std::stod(cells[4]);
        r.strength = std::stod(cells[5]);
        r.rho = std::stod(cells[6]);
        r.bound = std::stod(cells[7]);
        r.has_diag = !std::isnan(r.strength);
        rows.push_back(r);
    }
    return rows;
}

std::string format_scatter(const std::vector<ScatterPoint>& points) {
    static const char* kPalette[] = {"#4269d0", "#efb118", "#ff725c", "#6cc5b0",
                                     "#3ca951", "#ff8ab7", "#a463f2", "#97bbf5"};
    const double W = 640, H = 480, margin = 32;
    double xmin = 0, xmax = 1, ymin = 0, ymax = 1;
    if (!points.empty()) {
        xmin = xmax = points[0].x;
        ymin = ymax = points[0].y;
        for (const auto& p : points) {
            xmin = std::min(xmin, p.x);
            xmax = std::max(xmax, p.x);
            ymin = std::min(ymin, p.y);
            ymax = std::max(ymax, p.y);
        }
    }
    if (xmax - xmin < 1e-12) xmax = xmin + 1;
    if (ymax - ymin < 1e-12) ymax = ymin + 1;

    char buf[256];
    std::string out;
    std::snprintf(buf, sizeof buf,
                  "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 %g %g\">\n", W, H);
    out += buf;
    out += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    for (const auto& p : points) {
        const double px = margin + (p.x - xmin) / (xmax - xmin) * (W - 2 * margin);
        const double py = H - margin - (p.y - ymin) / (ymax - ymin) * (H - 2 * margin);
        std::snprintf(buf, sizeof buf,
                      "<circle cx=\"%.3f\" cy=\"%.3f\" r=\"3\" fill=\"%s\" fill-opacity=\"0.75\">"
                      "<title>head %zu label %d</title></circle>\n",
                      px, py, kPalette[p.head % 8], p.head, p.label);
        out += buf;
    }
    out += "</svg>\n";
    return out;
}

void emit_scatter(const std::vector<ScatterPoint>& points, const std::string& path) {
    write_text_file(path, format_scatter(points));
}

void emit_features(const std::vector<std::vector<float>>& per_head_embeddings,
                   const std::vector<int>& labels, const std::string& path) {
    if (per_head_embeddings.empty() || labels.empty())
        throw ConfigError("emit_features: nothing to write");
    const size_t n = labels.size();
    const size_t total = per_head_embeddings[0].size();
    if (total % n != 0)
        throw DimError("emit_features: embedding size " + std::to_string(total) +
                       " not divisible by " + std::to_string(n) + " examples");
    const size_t dim = total / n;

    std::string out = "head,example";
    for (size_t d = 0; d < dim; ++d) out += ",dim_" + std::to_string(d);
    out += ",label\n";
    for (size_t h = 0; h < per_head_embeddings.size(); ++h) {
        const auto& emb = per_head_embeddings[h];
        if (emb.size() != total)
            throw DimError("emit_features: head " + std::to_string(h) + " holds " +
                           std::to_string(emb.size()) + " values, head 0 holds " +
                           std::to_string(total));
        for (size_t i = 0; i < n; ++i) {
            out += std::to_string(h) + ',' + std::to_string(i);
            for (size_t d = 0; d < dim; ++d) out += ',' + fmt_double(double(emb[i * dim + d]));
            out += ',' + std::to_string(labels[i]) + '\n';
        }
    }
    write_text_file(path, out);
}

std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    if (in.bad()) throw IoError("read failed on " + path);
    return ss.str();
}

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out.write(text.data(), std::streamsize(text.size()));
    if (!out) throw IoError("write failed on " + path);
}

}  // namespace gram
