#pragma once

#include <charconv>
#include <cstddef>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "stableflow/errors.hpp"

namespace stableflow::csv {

/// Shortest decimal that parses back to the same double.
inline std::string format_double(double v) {
    char buf[32];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

inline void append_row(std::string& out, const std::vector<double>& values) {
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (i) out += ',';
        out += format_double(values[i]);
    }
    out += '\n';
}

inline void write_file(const std::string& path, const std::string& content) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot open '" + path + "' for writing");
    f << content;
    if (!f) throw Error("failed writing '" + path + "'");
}

inline std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("cannot open '" + path + "'");
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

struct Table {
    std::vector<std::string> header;
    std::vector<std::vector<double>> rows;
};

/// Parses a numeric CSV with a header line. Errors carry the byte offset of
/// the offending field.
inline Table parse(std::string_view text) {
    Table table;
    std::size_t pos = 0;
    auto line_end = [&](std::size_t from) {
        const std::size_t e = text.find('\n', from);
        return e == std::string_view::npos ? text.size() : e;
    };
    const std::size_t header_end = line_end(0);
    if (header_end == 0) throw ParseError(0, "missing CSV header");
    {
        std::string_view h = text.substr(0, header_end);
        if (!h.empty() && h.back() == '\r') h.remove_suffix(1);
        std::size_t start = 0;
        while (true) {
            const std::size_t comma = h.find(',', start);
            table.header.emplace_back(h.substr(start, comma == std::string_view::npos ? h.npos : comma - start));
            if (comma == std::string_view::npos) break;
            start = comma + 1;
        }
    }
    pos = header_end + 1;
    while (pos < text.size()) {
        const std::size_t end = line_end(pos);
        std::string_view line = text.substr(pos, end - pos);
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        if (!line.empty()) {
            std::vector<double> row;
            std::size_t start = 0;
            while (true) {
                const std::size_t comma = line.find(',', start);
                const std::size_t stop = comma == std::string_view::npos ? line.size() : comma;
                double v = 0.0;
                const char* first = line.data() + start;
                const char* last = line.data() + stop;
                auto res = std::from_chars(first, last, v);
                if (res.ec != std::errc() || res.ptr != last) {
                    throw ParseError(pos + start, "invalid number in CSV");
                }
                row.push_back(v);
                if (comma == std::string_view::npos) break;
                start = comma + 1;
            }
            if (row.size() != table.header.size()) {
                throw ParseError(pos, "CSV row has " + std::to_string(row.size()) + " fields, header has " +
                                          std::to_string(table.header.size()));
            }
            table.rows.push_back(std::move(row));
        }
        pos = end + 1;
    }
    return table;
}

}  // namespace stableflow::csv
