#include "ticketlab/dataio.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace tl::io {

namespace {

// ---- little-endian buffer helpers (host is little-endian x86) ----

void put_u32(std::vector<std::uint8_t>& b, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
void put_u64(std::vector<std::uint8_t>& b, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
void put_str(std::vector<std::uint8_t>& b, const std::string& s) {
    put_u32(b, static_cast<std::uint32_t>(s.size()));
    b.insert(b.end(), s.begin(), s.end());
}

struct Reader {
    const std::uint8_t* p;
    const std::uint8_t* end;
    std::size_t offset(const std::uint8_t* base) const { return static_cast<std::size_t>(p - base); }
    void need(std::size_t n, const char* what) {
        if (static_cast<std::size_t>(end - p) < n)
            throw CorruptionError(std::string("checkpoint truncated while reading ") + what);
    }
    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
        p += 4;
        return v;
    }
    std::uint64_t u64(const char* what) {
        need(8, what);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
        p += 8;
        return v;
    }
    std::string str(const char* what) {
        const std::uint32_t n = u32(what);
        need(n, what);
        std::string s(reinterpret_cast<const char*>(p), n);
        p += n;
        return s;
    }
};

std::uint64_t fnv1a64(const std::uint8_t* data, std::size_t n) {
    std::uint64_t h = 1469598103934665603ull;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= data[i];
        h *= 1099511628211ull;
    }
    return h;
}

constexpr char kMagic[8] = {'T', 'L', 'C', 'K', 'P', 'T', '0', '1'};

}  // namespace

void save_checkpoint(const Checkpoint& ck, const std::string& path) {
    std::vector<std::uint8_t> pl;
    put_u64(pl, static_cast<std::uint64_t>(ck.rewind_iteration));
    put_u32(pl, static_cast<std::uint32_t>(ck.meta.size()));
    for (const auto& [k, v] : ck.meta) {
        put_str(pl, k);
        put_str(pl, v);
    }
    put_u32(pl, static_cast<std::uint32_t>(ck.arrays.size()));
    for (const auto& [name, arr] : ck.arrays) {
        put_str(pl, name);
        auto it = ck.shapes.find(name);
        const std::vector<int> shape = it == ck.shapes.end() ? std::vector<int>{} : it->second;
        put_u32(pl, static_cast<std::uint32_t>(shape.size()));
        for (int d : shape) put_u32(pl, static_cast<std::uint32_t>(d));
        put_u64(pl, arr.size());
        const std::size_t at = pl.size();
        pl.resize(at + arr.size() * 8);
        std::memcpy(pl.data() + at, arr.data(), arr.size() * 8);
    }
    put_u32(pl, static_cast<std::uint32_t>(ck.masks.size()));
    for (const auto& [name, bits] : ck.masks) {
        put_str(pl, name);
        put_u64(pl, bits.size());
        pl.insert(pl.end(), bits.begin(), bits.end());
    }

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw FormatError("cannot open for writing: " + path);
    f.write(kMagic, 8);
    std::vector<std::uint8_t> head;
    put_u32(head, ck.version);
    put_u64(head, pl.size());
    f.write(reinterpret_cast<const char*>(head.data()), static_cast<std::streamsize>(head.size()));
    f.write(reinterpret_cast<const char*>(pl.data()), static_cast<std::streamsize>(pl.size()));
    std::vector<std::uint8_t> tail;
    put_u64(tail, fnv1a64(pl.data(), pl.size()));
    f.write(reinterpret_cast<const char*>(tail.data()), static_cast<std::streamsize>(tail.size()));
    if (!f) throw FormatError("short write: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot open: " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                    std::istreambuf_iterator<char>());
    if (bytes.size() < 8 + 4 + 8 + 8 || std::memcmp(bytes.data(), kMagic, 8) != 0)
        throw FormatError("not a ticketlab checkpoint: " + path);
    Reader r{bytes.data() + 8, bytes.data() + bytes.size()};
    Checkpoint ck;
    ck.version = r.u32("version");
    if (ck.version != 1)
        throw FormatError("unsupported checkpoint version " + std::to_string(ck.version));
    const std::uint64_t plen = r.u64("payload length");
    if (static_cast<std::uint64_t>(r.end - r.p) < plen + 8)
        throw CorruptionError("checkpoint truncated: payload promises " + std::to_string(plen) +
                              " bytes");
    const std::uint8_t* payload = r.p;
    Reader body{payload, payload + plen};
    ck.rewind_iteration = static_cast<std::int64_t>(body.u64("rewind iteration"));
    const std::uint32_t n_meta = body.u32("meta count");
    for (std::uint32_t i = 0; i < n_meta; ++i) {
        std::string k = body.str("meta key");
        ck.meta[k] = body.str("meta value");
    }
    const std::uint32_t n_arrays = body.u32("array count");
    for (std::uint32_t i = 0; i < n_arrays; ++i) {
        std::string name = body.str("array name");
        const std::uint32_t rank = body.u32("array rank");
        std::vector<int> shape(rank);
        for (std::uint32_t d = 0; d < rank; ++d) shape[d] = static_cast<int>(body.u32("dim"));
        if (!shape.empty()) ck.shapes[name] = shape;
        const std::uint64_t n = body.u64("array length");
        body.need(n * 8, "array data");
        std::vector<double> arr(n);
        std::memcpy(arr.data(), body.p, n * 8);
        body.p += n * 8;
        ck.arrays[name] = std::move(arr);
    }
    const std::uint32_t n_masks = body.u32("mask count");
    for (std::uint32_t i = 0; i < n_masks; ++i) {
        std::string name = body.str("mask name");
        const std::uint64_t n = body.u64("mask length");
        body.need(n, "mask data");
        ck.masks[name].assign(body.p, body.p + n);
        body.p += n;
    }
    Reader tail{payload + plen, bytes.data() + bytes.size()};
    const std::uint64_t want = tail.u64("checksum");
    const std::uint64_t got = fnv1a64(payload, plen);
    if (want != got) throw CorruptionError("checkpoint checksum mismatch: " + path);
    return ck;
}

// ---- IDX ----

namespace {
std::uint32_t read_be32(std::ifstream& f, const std::string& path, std::size_t at) {
    std::uint8_t b[4];
    f.read(reinterpret_cast<char*>(b), 4);
    if (!f)
        throw FormatError("IDX truncated at byte " + std::to_string(at) + ": " + path);
    return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) |
           (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
}
void write_be32(std::ofstream& f, std::uint32_t v) {
    std::uint8_t b[4] = {static_cast<std::uint8_t>(v >> 24), static_cast<std::uint8_t>(v >> 16),
                         static_cast<std::uint8_t>(v >> 8), static_cast<std::uint8_t>(v)};
    f.write(reinterpret_cast<const char*>(b), 4);
}
}  // namespace

TensorPtr load_idx_images(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot open: " + path);
    const std::uint32_t magic = read_be32(f, path, 0);
    if (magic != 0x00000803)
        throw FormatError("bad IDX image magic at byte 0: " + path);
    const int n = static_cast<int>(read_be32(f, path, 4));
    const int rows = static_cast<int>(read_be32(f, path, 8));
    const int cols = static_cast<int>(read_be32(f, path, 12));
    std::vector<std::uint8_t> raw(static_cast<std::size_t>(n) * rows * cols);
    f.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!f) throw FormatError("IDX image data truncated at byte 16: " + path);
    auto t = Tensor::create({n, 1, rows, cols});
    for (std::size_t i = 0; i < raw.size(); ++i)
        t->data[i] = static_cast<double>(raw[i]) / 127.5 - 1.0;
    return t;
}

std::vector<int> load_idx_labels(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot open: " + path);
    const std::uint32_t magic = read_be32(f, path, 0);
    if (magic != 0x00000801)
        throw FormatError("bad IDX label magic at byte 0: " + path);
    const int n = static_cast<int>(read_be32(f, path, 4));
    std::vector<std::uint8_t> raw(static_cast<std::size_t>(n));
    f.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!f) throw FormatError("IDX label data truncated at byte 8: " + path);
    return std::vector<int>(raw.begin(), raw.end());
}

void write_idx_images(const std::string& path, const Tensor& images) {
    if (images.shape.size() != 4 || images.shape[1] != 1)
        throw FormatError("write_idx_images: expected (n,1,h,w) tensor");
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    write_be32(f, 0x00000803);
    write_be32(f, static_cast<std::uint32_t>(images.shape[0]));
    write_be32(f, static_cast<std::uint32_t>(images.shape[2]));
    write_be32(f, static_cast<std::uint32_t>(images.shape[3]));
    for (double v : images.data) {
        const double b = std::clamp((v + 1.0) * 127.5, 0.0, 255.0);
        const std::uint8_t byte = static_cast<std::uint8_t>(std::lround(b));
        f.write(reinterpret_cast<const char*>(&byte), 1);
    }
}

void write_idx_labels(const std::string& path, const std::vector<int>& labels) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    write_be32(f, 0x00000801);
    write_be32(f, static_cast<std::uint32_t>(labels.size()));
    for (int l : labels) {
        const std::uint8_t byte = static_cast<std::uint8_t>(l);
        f.write(reinterpret_cast<const char*>(&byte), 1);
    }
}

// ---- synthetic datasets ----

namespace {

Dataset make_shapes16(int n, Rng& rng) {
    const int H = 16, W = 16;
    Dataset ds;
    ds.images = Tensor::create({n, 1, H, W});
    ds.labels.resize(n);
    ds.classes = 4;
    for (int i = 0; i < n; ++i) {
        const int cls = i % 4;
        ds.labels[i] = cls;
        double* img = ds.images->data.data() + static_cast<std::int64_t>(i) * H * W;
        const double cx = rng.uniform(5.0, 10.0);
        const double cy = rng.uniform(5.0, 10.0);
        const double intensity = rng.uniform(0.7, 1.0);
        const double size = rng.uniform(2.5, 4.5);
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                bool on = false;
                switch (cls) {
                    case 0:  // disk
                        on = (x - cx) * (x - cx) + (y - cy) * (y - cy) <= size * size;
                        break;
                    case 1:  // cross
                        on = (std::abs(x - cx) <= 1.0 && std::abs(y - cy) <= size + 1.0) ||
                             (std::abs(y - cy) <= 1.0 && std::abs(x - cx) <= size + 1.0);
                        break;
                    case 2:  // horizontal bar
                        on = std::abs(y - cy) <= 1.5 && x >= 2 && x <= 13;
                        break;
                    case 3:  // vertical bar
                        on = std::abs(x - cx) <= 1.5 && y >= 2 && y <= 13;
                        break;
                }
                double v = on ? intensity : 0.0;
                v += rng.normal(0.0, 0.05);
                img[y * W + x] = std::clamp(v, 0.0, 1.0) * 2.0 - 1.0;
            }
    }
    return ds;
}

Dataset make_blobs2d(int n, Rng& rng) {
    Dataset ds;
    ds.images = Tensor::create({n, 1, 1, 2});
    ds.labels.resize(n);
    ds.classes = 4;
    const double cx[4] = {-0.5, -0.5, 0.5, 0.5};
    const double cy[4] = {-0.5, 0.5, -0.5, 0.5};
    for (int i = 0; i < n; ++i) {
        const int cls = i % 4;
        ds.labels[i] = cls;
        ds.images->data[2 * i] = std::clamp(cx[cls] + rng.normal(0.0, 0.15), -1.0, 1.0);
        ds.images->data[2 * i + 1] = std::clamp(cy[cls] + rng.normal(0.0, 0.15), -1.0, 1.0);
    }
    return ds;
}

}  // namespace

DatasetPair materialize(const DatasetSpec& spec) {
    DatasetPair pair;
    switch (spec.kind) {
        case DatasetKind::blobs2d: {
            Rng rng(spec.seed * 2654435761ull + 17);
            pair.train = make_blobs2d(spec.n_train, rng);
            pair.test = make_blobs2d(spec.n_test, rng);
            break;
        }
        case DatasetKind::shapes16: {
            Rng rng(spec.seed * 2654435761ull + 29);
            pair.train = make_shapes16(spec.n_train, rng);
            pair.test = make_shapes16(spec.n_test, rng);
            break;
        }
        case DatasetKind::idx_images: {
            auto images = load_idx_images(spec.idx_images_path);
            auto labels = load_idx_labels(spec.idx_labels_path);
            const int total = images->shape[0];
            const int n_train = std::min(spec.n_train, total);
            const int n_test = std::min(spec.n_test, total - n_train);
            const std::int64_t hw =
                static_cast<std::int64_t>(images->shape[2]) * images->shape[3];
            auto slice = [&](int from, int count) {
                Dataset ds;
                ds.images = Tensor::create({count, 1, images->shape[2], images->shape[3]});
                std::copy_n(images->data.begin() + from * hw, count * hw,
                            ds.images->data.begin());
                ds.labels.assign(labels.begin() + from, labels.begin() + from + count);
                ds.classes = 10;
                return ds;
            };
            pair.train = slice(0, n_train);
            pair.test = slice(n_train, n_test);
            break;
        }
    }
    return pair;
}

// ---- image grids ----

void emit_image_grid(const Tensor& images, int columns, const std::string& path) {
    if (images.shape.size() != 4 || images.shape[0] == 0)
        throw ContractError("emit_image_grid: need a non-empty (n,c,h,w) batch");
    const int n = images.shape[0], C = images.shape[1], H = images.shape[2], W = images.shape[3];
    if (C != 1 && C != 3)
        throw ContractError("emit_image_grid: channels must be 1 or 3");
    const int rows = (n + columns - 1) / columns;
    const int GW = columns * W + (columns - 1);
    const int GH = rows * H + (rows - 1);
    std::vector<std::uint8_t> pix(static_cast<std::size_t>(GW) * GH * C, 255);  // separators
    for (int i = 0; i < n; ++i) {
        const int r = i / columns, c = i % columns;
        const int oy = r * (H + 1), ox = c * (W + 1);
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x)
                for (int ch = 0; ch < C; ++ch) {
                    const double v =
                        images.data[((static_cast<std::int64_t>(i) * C + ch) * H + y) * W + x];
                    const double b = std::clamp((v + 1.0) * 127.5, 0.0, 255.0);
                    pix[(static_cast<std::size_t>(oy + y) * GW + ox + x) * C + ch] =
                        static_cast<std::uint8_t>(std::lround(b));
                }
    }
    // blank out unused trailing tiles
    for (int i = n; i < rows * columns; ++i) {
        const int r = i / columns, c = i % columns;
        const int oy = r * (H + 1), ox = c * (W + 1);
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x)
                for (int ch = 0; ch < C; ++ch)
                    pix[(static_cast<std::size_t>(oy + y) * GW + ox + x) * C + ch] = 0;
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw FormatError("cannot open for writing: " + path);
    f << (C == 1 ? "P5" : "P6") << "\n" << GW << " " << GH << "\n255\n";
    f.write(reinterpret_cast<const char*>(pix.data()), static_cast<std::streamsize>(pix.size()));
}

PnmImage read_pnm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot open: " + path);
    std::string magic;
    f >> magic;
    PnmImage img;
    if (magic == "P5")
        img.channels = 1;
    else if (magic == "P6")
        img.channels = 3;
    else
        throw FormatError("unsupported PNM magic '" + magic + "': " + path);
    int maxval = 0;
    f >> img.width >> img.height >> maxval;
    if (!f || maxval != 255) throw FormatError("bad PNM header: " + path);
    f.get();  // single whitespace after maxval
    img.pixels.resize(static_cast<std::size_t>(img.width) * img.height * img.channels);
    f.read(reinterpret_cast<char*>(img.pixels.data()),
           static_cast<std::streamsize>(img.pixels.size()));
    if (!f) throw FormatError("PNM pixel data truncated: " + path);
    return img;
}

}  // namespace tl::io
