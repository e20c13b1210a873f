#pragma once

// Minimal RFC-4180-style CSV reader/writer: quoted fields may hold commas,
// quotes, and newlines; rows end in LF or CRLF.

#include <string>
#include <vector>

namespace ppm {

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    // Column position by header name, -1 if absent.
    int column(const std::string& name) const {
        for (size_t i = 0; i < header.size(); ++i)
            if (header[i] == name) return static_cast<int>(i);
        return -1;
    }
};

CsvTable csv_read_file(const std::string& path);

std::string csv_quote(const std::string& field);

void csv_write_file(const std::string& path, const std::vector<std::string>& header,
                    const std::vector<std::vector<std::string>>& rows);

}  // namespace ppm
