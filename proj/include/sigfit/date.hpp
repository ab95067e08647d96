#pragma once

#include <compare>
#include <string>

#include "sigfit/errors.hpp"

namespace sigfit {

// Calendar date stored as days since 1970-01-01 (proleptic Gregorian).
class Date {
  public:
    Date() = default;
    explicit Date(int serial) : serial_(serial) {}

    static Date from_ymd(int year, int month, int day);
    // Accepts "DD/MM/YYYY" or "YYYY-MM-DD".
    static Date parse(const std::string& text);

    int serial() const { return serial_; }
    void to_ymd(int& year, int& month, int& day) const;
    std::string iso() const;       // YYYY-MM-DD
    std::string ddmmyyyy() const;  // DD/MM/YYYY

    Date operator+(int days) const { return Date(serial_ + days); }
    Date operator-(int days) const { return Date(serial_ - days); }
    int operator-(Date other) const { return serial_ - other.serial_; }
    auto operator<=>(const Date&) const = default;

  private:
    int serial_ = 0;
};

}  // namespace sigfit
