#include "memwarp/volume_io.hpp"

#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>
#include <zlib.h>

namespace memwarp::io {

namespace fs = std::filesystem;

namespace {

static_assert(std::endian::native == std::endian::little, "volume IO assumes a little-endian host");

enum class Kind { image, labels, field, probabilities };

// A volume in tensor layout ([H,W,D] or [C,H,W,D]) plus its metadata.
struct Stored {
    torch::Tensor data;
    Kind kind = Kind::image;
    Spacing spacing{1.0, 1.0, 1.0};
    int num_classes = 0;
};

constexpr int16_t kDtUint8 = 2, kDtInt16 = 4, kDtInt32 = 8, kDtFloat32 = 16, kDtFloat64 = 64, kDtInt8 = 256,
                  kDtUint16 = 512;
constexpr int16_t kIntentLabel = 1002, kIntentVector = 1007;
constexpr int kHeaderSize = 348;
constexpr int kVoxOffset = 352;

enum class Format { nifti, nifti_gz, mwv };

bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

Format format_of(const fs::path& path) {
    const auto name = path.filename().string();
    if (ends_with(name, ".nii.gz")) {
        return Format::nifti_gz;
    }
    if (ends_with(name, ".nii")) {
        return Format::nifti;
    }
    if (ends_with(name, ".mwv")) {
        return Format::mwv;
    }
    throw DataError("unsupported volume extension: " + path.string());
}

template <typename T>
void put(std::vector<char>& buf, size_t offset, T value) {
    std::memcpy(buf.data() + offset, &value, sizeof(T));
}

template <typename T>
T get(const std::vector<char>& buf, size_t offset) {
    T value;
    std::memcpy(&value, buf.data() + offset, sizeof(T));
    return value;
}

void put_string(std::vector<char>& buf, size_t offset, size_t width, const std::string& s) {
    std::memcpy(buf.data() + offset, s.data(), std::min(width - 1, s.size()));
}

std::vector<char> tensor_bytes(const torch::Tensor& t) {
    auto c = t.contiguous();
    std::vector<char> out(static_cast<size_t>(c.numel() * c.element_size()));
    std::memcpy(out.data(), c.data_ptr(), out.size());
    return out;
}

// NIfTI stores dim1 fastest; these permutations map tensor layout to file
// order and back.
torch::Tensor to_file_order(const torch::Tensor& t) {
    return t.dim() == 3 ? t.permute({2, 1, 0}) : t.permute({0, 3, 2, 1});
}

void write_bytes(const fs::path& path, Format format, const std::vector<char>& head, const std::vector<char>& body) {
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path());
    }
    if (format == Format::nifti_gz) {
        gzFile gz = gzopen(path.string().c_str(), "wb6");
        if (!gz) {
            throw DataError("cannot write " + path.string());
        }
        bool ok = gzwrite(gz, head.data(), static_cast<unsigned>(head.size())) == static_cast<int>(head.size());
        size_t done = 0;
        while (ok && done < body.size()) {
            const auto chunk = static_cast<unsigned>(std::min<size_t>(body.size() - done, 1u << 26));
            ok = gzwrite(gz, body.data() + done, chunk) == static_cast<int>(chunk);
            done += chunk;
        }
        if (gzclose(gz) != Z_OK || !ok) {
            throw DataError("failed writing " + path.string());
        }
        return;
    }
    std::ofstream out(path, std::ios::binary);
    out.write(head.data(), static_cast<std::streamsize>(head.size()));
    out.write(body.data(), static_cast<std::streamsize>(body.size()));
    if (!out) {
        throw DataError("failed writing " + path.string());
    }
}

std::vector<char> read_all(const fs::path& path) {
    if (!fs::exists(path)) {
        throw DataError("no such file: " + path.string());
    }
    gzFile gz = gzopen(path.string().c_str(), "rb");
    if (!gz) {
        throw DataError("cannot open " + path.string());
    }
    std::vector<char> out;
    char chunk[1 << 16];
    int n;
    while ((n = gzread(gz, chunk, sizeof(chunk))) > 0) {
        out.insert(out.end(), chunk, chunk + n);
    }
    gzclose(gz);
    if (n < 0) {
        throw DataError("corrupt compressed stream in " + path.string());
    }
    return out;
}

// --- NIfTI-1 ---------------------------------------------------------------

void write_nifti(const Stored& s, const fs::path& path, Format format) {
    torch::Tensor data;
    int16_t datatype = kDtFloat32;
    if (s.kind == Kind::labels) {
        data = s.data.to(torch::kInt16);
        datatype = kDtInt16;
    } else {
        data = s.data.to(torch::kFloat32);
    }
    std::vector<char> head(kVoxOffset, 0);
    put<int32_t>(head, 0, kHeaderSize);
    const auto sz = s.data.sizes();
    std::vector<int16_t> dims(8, 1);
    if (s.data.dim() == 3) {
        dims[0] = 3;
        dims[1] = static_cast<int16_t>(sz[0]);
        dims[2] = static_cast<int16_t>(sz[1]);
        dims[3] = static_cast<int16_t>(sz[2]);
    } else {
        dims[1] = static_cast<int16_t>(sz[1]);
        dims[2] = static_cast<int16_t>(sz[2]);
        dims[3] = static_cast<int16_t>(sz[3]);
        if (s.kind == Kind::field) {
            dims[0] = 5;
            dims[4] = 1;
            dims[5] = static_cast<int16_t>(sz[0]);
        } else {
            dims[0] = 4;
            dims[4] = static_cast<int16_t>(sz[0]);
        }
    }
    for (int i = 0; i < 8; ++i) {
        put<int16_t>(head, 40 + 2 * i, dims[i]);
    }
    if (s.kind == Kind::field) {
        put<int16_t>(head, 68, kIntentVector);
        put_string(head, 328, 16, "disp_voxel");
        put_string(head, 148, 80, "memwarp displacement; units=voxel; component k offsets axis k");
    } else if (s.kind == Kind::labels) {
        put<int16_t>(head, 68, kIntentLabel);
        put<float>(head, 56, static_cast<float>(s.num_classes));
        put_string(head, 148, 80, "memwarp labels");
    } else if (s.kind == Kind::probabilities) {
        put_string(head, 148, 80, "memwarp class probabilities");
    }
    put<int16_t>(head, 70, datatype);
    put<int16_t>(head, 72, static_cast<int16_t>(data.element_size() * 8));
    put<float>(head, 76, 1.0f);
    for (int i = 0; i < 3; ++i) {
        put<float>(head, 80 + 4 * i, static_cast<float>(s.spacing[i]));
    }
    put<float>(head, 108, static_cast<float>(kVoxOffset));
    put<float>(head, 112, 0.0f);
    put<uint8_t>(head, 123, 2); // mm
    put<int16_t>(head, 252, 1);
    put<int16_t>(head, 254, 1);
    for (int i = 0; i < 3; ++i) {
        put<float>(head, 280 + 16 * i + 4 * i, static_cast<float>(s.spacing[i]));
    }
    std::memcpy(head.data() + 344, "n+1\0", 4);
    write_bytes(path, format, head, tensor_bytes(to_file_order(data)));
}

torch::ScalarType nifti_scalar(int16_t datatype) {
    switch (datatype) {
    case kDtUint8: return torch::kUInt8;
    case kDtInt8: return torch::kInt8;
    case kDtInt16: return torch::kInt16;
    case kDtInt32: return torch::kInt32;
    case kDtFloat32: return torch::kFloat32;
    case kDtFloat64: return torch::kFloat64;
    case kDtUint16: return torch::kInt32; // widened below
    default: throw DataError("unsupported NIfTI datatype " + std::to_string(datatype));
    }
}

Stored read_nifti(const fs::path& path) {
    const auto bytes = read_all(path);
    if (bytes.size() < static_cast<size_t>(kHeaderSize)) {
        throw DataError("truncated NIfTI header in " + path.string());
    }
    if (get<int32_t>(bytes, 0) != kHeaderSize) {
        throw DataError("not a little-endian NIfTI-1 file: " + path.string());
    }
    if (std::memcmp(bytes.data() + 344, "n+1", 3) != 0) {
        throw DataError("unsupported NIfTI magic (expected single-file n+1): " + path.string());
    }
    const int16_t ndim = get<int16_t>(bytes, 40);
    if (ndim < 3 || ndim > 5) {
        throw DataError("unsupported NIfTI dimensionality " + std::to_string(ndim));
    }
    std::vector<int64_t> dims;
    for (int i = 1; i <= ndim; ++i) {
        const int16_t d = get<int16_t>(bytes, 40 + 2 * i);
        if (d < 1) {
            throw DataError("invalid NIfTI dim in " + path.string());
        }
        dims.push_back(d);
    }
    const int16_t datatype = get<int16_t>(bytes, 70);
    const int16_t intent = get<int16_t>(bytes, 68);
    const auto offset = static_cast<size_t>(get<float>(bytes, 108));
    int64_t count = 1;
    for (auto d : dims) {
        count *= d;
    }
    const int64_t h = dims[0], w = dims[1], d = dims[2];
    const int64_t channels = count / (h * w * d);
    torch::Tensor raw;
    if (datatype == kDtUint16) {
        std::vector<uint16_t> tmp(static_cast<size_t>(count));
        if (bytes.size() < offset + tmp.size() * 2) {
            throw DataError("truncated NIfTI data in " + path.string());
        }
        std::memcpy(tmp.data(), bytes.data() + offset, tmp.size() * 2);
        raw = torch::empty({count}, torch::kInt32);
        auto* p = raw.data_ptr<int32_t>();
        for (int64_t i = 0; i < count; ++i) {
            p[i] = tmp[static_cast<size_t>(i)];
        }
    } else {
        raw = torch::empty({count}, nifti_scalar(datatype));
        const size_t nbytes = static_cast<size_t>(count * raw.element_size());
        if (bytes.size() < offset + nbytes) {
            throw DataError("truncated NIfTI data in " + path.string());
        }
        std::memcpy(raw.data_ptr(), bytes.data() + offset, nbytes);
    }
    Stored s;
    for (int i = 0; i < 3; ++i) {
        // pixdim is float32; take the shortest decimal that rounds to it so
        // spacings written from doubles such as 1.8 come back exactly.
        const float stored = get<float>(bytes, 80 + 4 * i);
        char buf[32];
        const auto end = std::to_chars(buf, buf + sizeof buf, stored).ptr;
        s.spacing[i] = std::strtod(std::string(buf, end).c_str(), nullptr);
        if (!(s.spacing[i] > 0)) {
            s.spacing[i] = 1.0;
        }
    }
    if (ndim == 3 || channels == 1) {
        s.data = raw.reshape({d, w, h}).permute({2, 1, 0}).contiguous();
    } else {
        s.data = raw.reshape({channels, d, w, h}).permute({0, 3, 2, 1}).contiguous();
    }
    const bool integer = !torch::isFloatingType(raw.scalar_type());
    if (intent == kIntentVector && s.data.dim() == 4 && channels == 3) {
        s.kind = Kind::field;
        s.data = s.data.to(torch::kFloat32);
    } else if (s.data.dim() == 4) {
        s.kind = Kind::probabilities;
        s.data = s.data.to(torch::kFloat32);
    } else if (integer) {
        s.kind = Kind::labels;
        s.data = s.data.to(torch::kInt64);
        if (intent == kIntentLabel) {
            s.num_classes = static_cast<int>(get<float>(bytes, 56));
        }
    } else {
        s.kind = Kind::image;
        const float slope = get<float>(bytes, 112);
        const float inter = get<float>(bytes, 116);
        s.data = s.data.to(torch::kFloat32);
        if (slope != 0.0f && (slope != 1.0f || inter != 0.0f)) {
            s.data = s.data * slope + inter;
        }
    }
    return s;
}

// --- raw + JSON header -------------------------------------------------------

const char* kind_name(Kind k) {
    switch (k) {
    case Kind::image: return "image";
    case Kind::labels: return "labels";
    case Kind::field: return "field";
    case Kind::probabilities: return "probabilities";
    }
    return "image";
}

void write_mwv(const Stored& s, const fs::path& path) {
    const bool labels = s.kind == Kind::labels;
    auto data = labels ? s.data.to(torch::kInt32) : s.data.to(torch::kFloat32);
    nlohmann::json h;
    h["format"] = "mwv";
    h["version"] = 1;
    h["kind"] = kind_name(s.kind);
    h["dtype"] = labels ? "int32" : "float32";
    h["shape"] = s.data.sizes().vec();
    h["spacing"] = s.spacing;
    if (labels) {
        h["num_classes"] = s.num_classes;
    }
    if (s.kind == Kind::field) {
        h["units"] = "voxel";
    }
    const auto text = h.dump() + "\n";
    write_bytes(path, Format::mwv, std::vector<char>(text.begin(), text.end()), tensor_bytes(data));
}

Stored read_mwv(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("no such file: " + path.string());
    }
    std::string line;
    std::getline(in, line);
    nlohmann::json h;
    try {
        h = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed mwv header in " + path.string() + ": " + e.what());
    }
    if (h.value("format", "") != "mwv") {
        throw DataError("not an mwv file: " + path.string());
    }
    const auto dtype = h.value("dtype", "");
    torch::ScalarType scalar;
    if (dtype == "float32") {
        scalar = torch::kFloat32;
    } else if (dtype == "int32") {
        scalar = torch::kInt32;
    } else {
        throw DataError("unsupported mwv dtype '" + dtype + "'");
    }
    const auto shape = h.at("shape").get<std::vector<int64_t>>();
    auto t = torch::empty(shape, scalar);
    in.read(static_cast<char*>(t.data_ptr()), static_cast<std::streamsize>(t.numel() * t.element_size()));
    if (!in) {
        throw DataError("truncated mwv data in " + path.string());
    }
    Stored s;
    s.spacing = h.at("spacing").get<Spacing>();
    const auto kind = h.value("kind", "image");
    if (kind == "labels") {
        s.kind = Kind::labels;
        s.data = t.to(torch::kInt64);
        s.num_classes = h.value("num_classes", 0);
    } else {
        s.kind = kind == "field" ? Kind::field : kind == "probabilities" ? Kind::probabilities : Kind::image;
        s.data = t;
    }
    return s;
}

Stored read_stored(const fs::path& path) {
    return format_of(path) == Format::mwv ? read_mwv(path) : read_nifti(path);
}

void write_stored(const Stored& s, const fs::path& path) {
    const auto format = format_of(path);
    if (format == Format::mwv) {
        write_mwv(s, path);
    } else {
        write_nifti(s, path, format);
    }
}

void require_3d(const torch::Tensor& t, const char* what) {
    if (t.dim() != 3) {
        throw ContractError(std::string(what) + ": expected a [H,W,D] tensor");
    }
}

} // namespace

AnyVolume read_volume(const fs::path& path) {
    auto s = read_stored(path);
    switch (s.kind) {
    case Kind::labels: {
        const int n = s.num_classes > 0 ? s.num_classes : static_cast<int>(s.data.max().item<int64_t>()) + 1;
        return LabelVolume{s.data, n, s.spacing};
    }
    case Kind::field: return DisplacementField{s.data};
    case Kind::image: return ImageVolume{s.data, s.spacing};
    case Kind::probabilities: break;
    }
    throw DataError("read_volume: " + path.string() + " holds a multi-channel volume");
}

ImageVolume read_image(const fs::path& path) {
    auto v = read_volume(path);
    if (auto* img = std::get_if<ImageVolume>(&v)) {
        return *img;
    }
    if (auto* lab = std::get_if<LabelVolume>(&v)) {
        return {lab->labels.to(torch::kFloat32), lab->spacing};
    }
    throw DataError(path.string() + " is not a scalar image");
}

LabelVolume read_labels(const fs::path& path, int num_classes) {
    auto v = read_volume(path);
    auto* lab = std::get_if<LabelVolume>(&v);
    if (!lab) {
        throw DataError(path.string() + " is not an integer label volume");
    }
    if (num_classes > 0) {
        if (lab->labels.max().item<int64_t>() >= num_classes || lab->labels.min().item<int64_t>() < 0) {
            throw DataError(path.string() + " has labels outside [0, " + std::to_string(num_classes) + ")");
        }
        lab->num_classes = num_classes;
    }
    return *lab;
}

DisplacementField read_field(const fs::path& path) {
    auto v = read_volume(path);
    auto* f = std::get_if<DisplacementField>(&v);
    if (!f) {
        throw DataError(path.string() + " is not a displacement field");
    }
    return *f;
}

void write_volume(const ImageVolume& vol, const fs::path& path) {
    require_3d(vol.data, "write_volume");
    write_stored({vol.data.detach(), Kind::image, vol.spacing, 0}, path);
}

void write_volume(const LabelVolume& vol, const fs::path& path) {
    require_3d(vol.labels, "write_volume");
    write_stored({vol.labels, Kind::labels, vol.spacing, vol.num_classes}, path);
}

void write_field(const DisplacementField& field, const fs::path& path, const Spacing& spacing) {
    if (field.vectors.dim() != 4 || field.vectors.size(0) != 3) {
        throw ContractError("write_field: expected a [3,H,W,D] field");
    }
    write_stored({field.vectors.detach(), Kind::field, spacing, 0}, path);
}

void write_probabilities(const torch::Tensor& probabilities, const fs::path& path, const Spacing& spacing) {
    if (probabilities.dim() != 4) {
        throw ContractError("write_probabilities: expected [N,H,W,D]");
    }
    write_stored({probabilities.detach(), Kind::probabilities, spacing, 0}, path);
}

torch::Tensor read_probabilities(const fs::path& path) {
    auto s = read_stored(path);
    if (s.kind != Kind::probabilities) {
        throw DataError(path.string() + " is not a probability volume");
    }
    return s.data;
}

} // namespace memwarp::io
