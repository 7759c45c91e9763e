//! Display rounding and the per-country outcome table.

use std::io::{Read, Write};

use crate::ge::OutcomeRow;
use crate::panel::CountryCode;

use super::ReportError;

pub const OUTCOME_HEADER: [&str; 7] = [
    "exporter",
    "pct_trade_cond",
    "pct_trade_full",
    "pct_rgdp",
    "pct_imr",
    "pct_omr",
    "pct_prices",
];

/// Rounds to two decimals, ties to even, on the shortest decimal
/// representation of `v`. Negative zero prints as `0.00`.
pub fn round2(v: f64) -> String {
    if !v.is_finite() {
        return v.to_string();
    }
    // Shortest round-trip digits: `d.ddd` times 10^exp.
    let sci = format!("{:e}", v.abs());
    let (mantissa, exp) = sci.split_once('e').expect("scientific notation");
    let exp: i64 = exp.parse().expect("integer exponent");
    let digits: Vec<u8> = mantissa.bytes().filter(u8::is_ascii_digit).map(|b| b - b'0').collect();
    // Digits kept: all integer digits plus two decimals.
    let keep = exp + 1 + 2;
    let mut kept: Vec<u8> = if keep <= 0 {
        Vec::new()
    } else {
        (0..keep as usize).map(|k| digits.get(k).copied().unwrap_or(0)).collect()
    };
    let round_up = if keep < 0 {
        false
    } else {
        let k = keep as usize;
        match digits.get(k) {
            None => false,
            Some(&r) if r > 5 => true,
            Some(&r) if r < 5 => false,
            Some(_) => {
                let tail = digits[k + 1..].iter().any(|&d| d != 0);
                tail || kept.last().is_some_and(|d| d % 2 == 1)
            }
        }
    };
    if round_up {
        let mut k = kept.len();
        loop {
            if k == 0 {
                kept.insert(0, 1);
                break;
            }
            k -= 1;
            if kept[k] == 9 {
                kept[k] = 0;
            } else {
                kept[k] += 1;
                break;
            }
        }
    }
    while kept.len() < 3 {
        kept.insert(0, 0);
    }
    let split = kept.len() - 2;
    let int: String = kept[..split].iter().map(|d| char::from(b'0' + d)).collect();
    let int = int.trim_start_matches('0');
    let int = if int.is_empty() { "0" } else { int };
    let frac: String = kept[split..].iter().map(|d| char::from(b'0' + d)).collect();
    let negative = v < 0.0 && kept.iter().any(|&d| d != 0);
    format!("{}{int}.{frac}", if negative { "-" } else { "" })
}

/// `CHL 5.44 5.64 0.48 -0.29 -0.22 0.19`
pub fn table_row(row: &OutcomeRow) -> String {
    let mut s = row.country.to_string();
    for v in row.values() {
        s.push(' ');
        s.push_str(&round2(v));
    }
    s
}

/// Full-precision outcome file.
pub fn write_outcome(out: impl Write, rows: &[OutcomeRow]) -> std::io::Result<()> {
    write_rows(out, rows, |v| format!("{v:.16e}"))
}

/// Two-decimal outcome file.
pub fn write_outcome_display(out: impl Write, rows: &[OutcomeRow]) -> std::io::Result<()> {
    write_rows(out, rows, round2)
}

fn write_rows(
    out: impl Write,
    rows: &[OutcomeRow],
    fmt: impl Fn(f64) -> String,
) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(out);
    writeln!(w, "{}", OUTCOME_HEADER.join(","))?;
    for r in rows {
        let vals: Vec<String> = r.values().iter().map(|&v| fmt(v)).collect();
        writeln!(w, "{},{}", r.country, vals.join(","))?;
    }
    w.flush()
}

/// Parses an outcome file written by either writer.
pub fn read_outcome(input: impl Read) -> Result<Vec<OutcomeRow>, ReportError> {
    let mut rows = Vec::new();
    for rec in super::csv_records(input, "outcome", &OUTCOME_HEADER)? {
        let (line, fields) = rec?;
        let country: CountryCode = fields[0]
            .parse()
            .map_err(|e: crate::panel::InvalidCountryCode| ReportError::parse("outcome", line, e.to_string()))?;
        let mut v = [0.0; 6];
        for (k, slot) in v.iter_mut().enumerate() {
            *slot = super::parse_f64(&fields[k + 1], "outcome", line)?;
        }
        rows.push(OutcomeRow {
            country,
            pct_trade_cond: v[0],
            pct_trade_full: v[1],
            pct_rgdp: v[2],
            pct_imr: v[3],
            pct_omr: v[4],
            pct_prices: v[5],
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_even_ties() {
        assert_eq!(round2(0.125), "0.12");
        assert_eq!(round2(0.135), "0.14");
        assert_eq!(round2(-0.225), "-0.22");
        assert_eq!(round2(2.675), "2.68");
        assert_eq!(round2(0.1251), "0.13");
    }

    #[test]
    fn ordinary_values() {
        assert_eq!(round2(5.4412), "5.44");
        assert_eq!(round2(-0.2871), "-0.29");
        assert_eq!(round2(9.999), "10.00");
        assert_eq!(round2(123456.789), "123456.79");
        assert_eq!(round2(0.0), "0.00");
        assert_eq!(round2(-0.0), "0.00");
        assert_eq!(round2(-0.004), "0.00");
        assert_eq!(round2(0.005), "0.00");
        assert_eq!(round2(0.0051), "0.01");
        assert_eq!(round2(1e-20), "0.00");
        assert_eq!(round2(7.0), "7.00");
        assert_eq!(round2(1e21), "1000000000000000000000.00");
    }

    #[test]
    fn table_seven_layout() {
        let row = OutcomeRow {
            country: "CHL".parse().unwrap(),
            pct_trade_cond: 5.44,
            pct_trade_full: 5.64,
            pct_rgdp: 0.48,
            pct_imr: -0.29,
            pct_omr: -0.22,
            pct_prices: 0.19,
        };
        assert_eq!(table_row(&row), "CHL 5.44 5.64 0.48 -0.29 -0.22 0.19");
    }

    #[test]
    fn outcome_round_trip() {
        let rows = vec![OutcomeRow {
            country: "USA".parse().unwrap(),
            pct_trade_cond: -1.0 / 3.0,
            pct_trade_full: 2.5e-7,
            pct_rgdp: 0.0,
            pct_imr: -12.125,
            pct_omr: 1e-300,
            pct_prices: 7.0,
        }];
        let mut buf = Vec::new();
        write_outcome(&mut buf, &rows).unwrap();
        assert_eq!(read_outcome(buf.as_slice()).unwrap(), rows);
        let mut disp = Vec::new();
        write_outcome_display(&mut disp, &rows).unwrap();
        let text = String::from_utf8(disp).unwrap();
        assert_eq!(text.lines().nth(1), Some("USA,-0.33,0.00,0.00,-12.12,0.00,7.00"));
    }
}
