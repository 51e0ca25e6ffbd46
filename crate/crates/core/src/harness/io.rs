use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::threetower::PurchaseRecord;

/// Embedding matrix with stable id ordering. The binary format is a header
/// line `n d` followed by row-major 32-bit little-endian floats, with ids in
/// a sibling `.ids` file (one per line). A text alternative — one line per
/// row, `id,v1,...,vd` — is accepted transparently on load. Values are
/// stored in 32-bit and widened to f64 on load.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFile {
    pub ids: Vec<u64>,
    pub dim: usize,
    pub values: Vec<f64>,
}

fn ids_path(path: &Path) -> PathBuf {
    path.with_extension("ids")
}

pub fn write_embeddings(path: &Path, emb: &EmbeddingFile) -> Result<()> {
    if emb.values.len() != emb.ids.len() * emb.dim {
        return Err(Error::shape(
            "write_embeddings",
            emb.ids.len() * emb.dim,
            emb.values.len(),
        ));
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "{} {}", emb.ids.len(), emb.dim)?;
    for v in &emb.values {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    w.flush()?;
    let mut idw = BufWriter::new(fs::File::create(ids_path(path))?);
    for id in &emb.ids {
        writeln!(idw, "{id}")?;
    }
    idw.flush()?;
    Ok(())
}

pub fn write_embeddings_text(path: &Path, emb: &EmbeddingFile) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for (row, id) in emb.ids.iter().enumerate() {
        let vals: Vec<String> = emb.values[row * emb.dim..(row + 1) * emb.dim]
            .iter()
            .map(|v| format!("{}", *v as f32))
            .collect();
        writeln!(w, "{id},{}", vals.join(","))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingFile> {
    let bytes = fs::read(path)?;
    // binary sniff: ASCII header line "n d\n" followed by exactly 4·n·d bytes
    if let Some(pos) = bytes.iter().position(|&b| b == b'\n') {
        if let Ok(header) = std::str::from_utf8(&bytes[..pos]) {
            let parts: Vec<&str> = header.split_whitespace().collect();
            if parts.len() == 2 && !header.contains(',') {
                if let (Ok(n), Ok(d)) = (parts[0].parse::<usize>(), parts[1].parse::<usize>()) {
                    let body = &bytes[pos + 1..];
                    if body.len() == 4 * n * d {
                        return read_binary_embeddings(path, body, n, d);
                    }
                }
            }
        }
    }
    read_text_embeddings(path, &bytes)
}

fn read_binary_embeddings(path: &Path, body: &[u8], n: usize, d: usize) -> Result<EmbeddingFile> {
    let mut values = Vec::with_capacity(n * d);
    for chunk in body.chunks_exact(4) {
        values.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64);
    }
    let ids_file = ids_path(path);
    let reader = BufReader::new(fs::File::open(&ids_file).map_err(|e| {
        Error::data_msg(format!("id list {} for {}: {e}", ids_file.display(), path.display()))
    })?);
    let mut ids = Vec::with_capacity(n);
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        ids.push(t.parse::<u64>().map_err(|_| Error::data(lineno + 1, format!("bad id '{t}'")))?);
    }
    if ids.len() != n {
        return Err(Error::data_msg(format!(
            "{}: header says {n} rows, id list has {}",
            path.display(),
            ids.len()
        )));
    }
    Ok(EmbeddingFile { ids, dim: d, values })
}

fn read_text_embeddings(path: &Path, bytes: &[u8]) -> Result<EmbeddingFile> {
    let text = std::str::from_utf8(bytes)
        .map_err(|_| Error::data_msg(format!("{}: neither binary nor text embeddings", path.display())))?;
    let mut ids = Vec::new();
    let mut values = Vec::new();
    let mut dim = None;
    for (lineno, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        let mut parts = t.split(',');
        let id: u64 = parts
            .next()
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|_| Error::data(lineno + 1, "bad id"))?;
        let row: Vec<f64> = parts
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::data(lineno + 1, "bad real value"))?;
        match dim {
            None => dim = Some(row.len()),
            Some(d) if d != row.len() => {
                return Err(Error::data(lineno + 1, format!("row width {} != {d}", row.len())));
            }
            _ => {}
        }
        ids.push(id);
        values.extend(row);
    }
    let dim = dim.ok_or_else(|| Error::data_msg(format!("{}: empty embedding file", path.display())))?;
    Ok(EmbeddingFile { ids, dim, values })
}

/// Writes rows as a delimited table with a header line.
pub fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "{header}")?;
    for row in rows {
        writeln!(w, "{row}")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a delimited file, skipping an optional header; calls `parse` with
/// 1-based line numbers so malformed rows name their line.
pub fn read_csv_rows<T, F>(path: &Path, expected_cols: usize, mut parse: F) -> Result<Vec<T>>
where
    F: FnMut(usize, &[&str]) -> Result<T>,
{
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        let cols: Vec<&str> = t.split(',').map(|c| c.trim()).collect();
        if idx == 0 && cols.iter().any(|c| c.parse::<f64>().is_err() && !c.is_empty()) {
            // header line
            continue;
        }
        if cols.len() != expected_cols {
            return Err(Error::data(
                idx + 1,
                format!("expected {expected_cols} columns, found {}", cols.len()),
            ));
        }
        out.push(parse(idx + 1, &cols)?);
    }
    Ok(out)
}

pub fn write_prices_csv(path: &Path, item_ids: &[u64], prices: &[f64], n_weeks: usize) -> Result<()> {
    let mut rows = Vec::new();
    for (ji, &id) in item_ids.iter().enumerate() {
        for t in 0..n_weeks {
            let p = prices[ji * n_weeks + t];
            if p.is_finite() {
                rows.push(format!("{id},{t},{p:.6}"));
            }
        }
    }
    write_csv(path, "item_id,week,price", &rows)
}

pub fn read_prices_csv(path: &Path) -> Result<Vec<(u64, usize, f64)>> {
    read_csv_rows(path, 3, |line, cols| {
        let id = cols[0].parse::<u64>().map_err(|_| Error::data(line, "bad item_id"))?;
        let week = cols[1].parse::<usize>().map_err(|_| Error::data(line, "bad week"))?;
        let price = cols[2].parse::<f64>().map_err(|_| Error::data(line, "bad price"))?;
        if price <= 0.0 {
            return Err(Error::data(line, format!("price {price} must be positive")));
        }
        Ok((id, week, price))
    })
}

pub fn write_events_csv(path: &Path, rows: &[(u64, u64, usize)]) -> Result<()> {
    let lines: Vec<String> = rows
        .iter()
        .map(|(c, j, t)| format!("{c},{j},{t}"))
        .collect();
    write_csv(path, "consumer_id,item_id,week", &lines)
}

pub fn read_events_csv(path: &Path) -> Result<Vec<(u64, u64, usize)>> {
    read_csv_rows(path, 3, |line, cols| {
        Ok((
            cols[0].parse().map_err(|_| Error::data(line, "bad consumer_id"))?,
            cols[1].parse().map_err(|_| Error::data(line, "bad item_id"))?,
            cols[2].parse().map_err(|_| Error::data(line, "bad week"))?,
        ))
    })
}

pub fn write_months_csv(path: &Path, week_month: &[u8]) -> Result<()> {
    let lines: Vec<String> = week_month
        .iter()
        .enumerate()
        .map(|(w, m)| format!("{w},{m}"))
        .collect();
    write_csv(path, "week,month", &lines)
}

pub fn read_months_csv(path: &Path) -> Result<Vec<(usize, u8)>> {
    read_csv_rows(path, 2, |line, cols| {
        let w = cols[0].parse().map_err(|_| Error::data(line, "bad week"))?;
        let m: u8 = cols[1].parse().map_err(|_| Error::data(line, "bad month"))?;
        if !(1..=12).contains(&m) {
            return Err(Error::data(line, format!("month {m} out of 1..=12")));
        }
        Ok((w, m))
    })
}

pub fn write_purchases_csv(path: &Path, records: &[PurchaseRecord]) -> Result<()> {
    let lines: Vec<String> = records
        .iter()
        .map(|r| {
            format!(
                "{},{},{},{},{:.6},{:.6}",
                r.consumer_id, r.item_id, r.category_id, r.week, r.price, r.log_ref_price
            )
        })
        .collect();
    write_csv(
        path,
        "consumer_id,item_id,category_id,week,price,log_ref_price",
        &lines,
    )
}

pub fn read_purchases_csv(path: &Path) -> Result<Vec<PurchaseRecord>> {
    read_csv_rows(path, 6, |line, cols| {
        Ok(PurchaseRecord {
            consumer_id: cols[0].parse().map_err(|_| Error::data(line, "bad consumer_id"))?,
            item_id: cols[1].parse().map_err(|_| Error::data(line, "bad item_id"))?,
            category_id: cols[2].parse().map_err(|_| Error::data(line, "bad category_id"))?,
            week: cols[3].parse().map_err(|_| Error::data(line, "bad week"))?,
            price: cols[4].parse().map_err(|_| Error::data(line, "bad price"))?,
            log_ref_price: cols[5]
                .parse()
                .map_err(|_| Error::data(line, "bad log_ref_price"))?,
        })
    })
}

/// `events_daily.csv`: unit_id,date,count,dow,discount_flag,period_label,month.
pub fn write_events_daily_csv(
    path: &Path,
    panel: &crate::eventstudy::EventPanel,
) -> Result<()> {
    let mut lines = Vec::new();
    for unit in &panel.units {
        for row in &unit.rows {
            let label = match row.period {
                Some(p) => panel.period_labels[p].as_str(),
                None => "none",
            };
            lines.push(format!(
                "{},{},{},{},{},{},{}",
                unit.unit_id,
                row.day,
                row.count,
                row.dow,
                if row.discount { 1 } else { 0 },
                label,
                row.month
            ));
        }
    }
    write_csv(
        path,
        "unit_id,date,count,dow,discount_flag,period_label,month",
        &lines,
    )
}

pub fn read_events_daily_csv(path: &Path) -> Result<crate::eventstudy::EventPanel> {
    use crate::eventstudy::{EventPanel, EventRow, EventSeries};
    let mut labels: Vec<String> = Vec::new();
    let rows = read_csv_rows(path, 7, |line, cols| {
        let unit: u64 = cols[0].parse().map_err(|_| Error::data(line, "bad unit_id"))?;
        let day: u32 = cols[1].parse().map_err(|_| Error::data(line, "bad date"))?;
        let count: u64 = cols[2].parse().map_err(|_| Error::data(line, "bad count"))?;
        let dow: u8 = cols[3].parse().map_err(|_| Error::data(line, "bad dow"))?;
        let discount = match cols[4] {
            "0" => false,
            "1" => true,
            other => return Err(Error::data(line, format!("bad discount_flag '{other}'"))),
        };
        let period = if cols[5] == "none" {
            None
        } else {
            let label = cols[5].to_string();
            let idx = labels.iter().position(|l| l == &label).unwrap_or_else(|| {
                labels.push(label);
                labels.len() - 1
            });
            Some(idx)
        };
        let month: u8 = cols[6].parse().map_err(|_| Error::data(line, "bad month"))?;
        Ok((unit, EventRow { day, count, month, dow, period, discount }))
    })?;
    let mut units: Vec<EventSeries> = Vec::new();
    for (unit_id, row) in rows {
        match units.iter_mut().find(|u| u.unit_id == unit_id) {
            Some(series) => series.rows.push(row),
            None => units.push(EventSeries { unit_id, rows: vec![row] }),
        }
    }
    let panel = EventPanel {
        units,
        period_labels: labels,
    };
    panel.validate()?;
    Ok(panel)
}

/// `hedonic_panel.csv`: article_id,month,log_price,quantity,then features.
pub fn write_hedonic_panel_csv(path: &Path, panel: &crate::hedonic::HedonicPanel) -> Result<()> {
    let feat_names: Vec<String> = (0..panel.n_features).map(|k| format!("f{k}")).collect();
    let header = format!("article_id,month,log_price,quantity,{}", feat_names.join(","));
    let lines: Vec<String> = panel
        .rows
        .iter()
        .map(|r| {
            let feats: Vec<String> = r.features.iter().map(|v| format!("{v:.6}")).collect();
            format!(
                "{},{},{:.8},{},{}",
                r.article_id,
                r.month,
                r.log_price,
                r.quantity,
                feats.join(",")
            )
        })
        .collect();
    write_csv(path, &header, &lines)
}

pub fn read_hedonic_panel_csv(path: &Path, month_col: Option<usize>) -> Result<crate::hedonic::HedonicPanel> {
    use crate::hedonic::{HedonicPanel, HedonicRow};
    let reader = BufReader::new(fs::File::open(path)?);
    let mut rows = Vec::new();
    let mut n_features = None;
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        let cols: Vec<&str> = t.split(',').map(|c| c.trim()).collect();
        if idx == 0 && cols[0] == "article_id" {
            continue;
        }
        if cols.len() < 5 {
            return Err(Error::data(idx + 1, "need at least one feature column"));
        }
        let feats: Vec<f64> = cols[4..]
            .iter()
            .map(|c| c.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::data(idx + 1, "bad feature value"))?;
        match n_features {
            None => n_features = Some(feats.len()),
            Some(k) if k != feats.len() => {
                return Err(Error::data(idx + 1, format!("feature width {} != {k}", feats.len())));
            }
            _ => {}
        }
        rows.push(HedonicRow {
            article_id: cols[0].parse().map_err(|_| Error::data(idx + 1, "bad article_id"))?,
            month: cols[1].parse().map_err(|_| Error::data(idx + 1, "bad month"))?,
            log_price: cols[2].parse().map_err(|_| Error::data(idx + 1, "bad log_price"))?,
            quantity: cols[3].parse().map_err(|_| Error::data(idx + 1, "bad quantity"))?,
            features: feats,
        });
    }
    let n_features = n_features.ok_or_else(|| Error::data_msg("empty hedonic panel"))?;
    let panel = HedonicPanel {
        rows,
        n_features,
        month_col,
    };
    panel.validate()?;
    Ok(panel)
}

/// Reads a fully assembled choice panel from a directory holding
/// consumers.emb, items.emb, prices.csv, events.csv, months.csv.
pub fn read_choice_panel(dir: &Path) -> Result<crate::demand::ChoicePanel> {
    use crate::demand::{ChoiceEvent, ChoicePanel};
    let consumers = read_embeddings(&dir.join("consumers.emb"))?;
    let items = read_embeddings(&dir.join("items.emb"))?;
    let price_rows = read_prices_csv(&dir.join("prices.csv"))?;
    let event_rows = read_events_csv(&dir.join("events.csv"))?;
    let month_rows = read_months_csv(&dir.join("months.csv"))?;

    let n_weeks = month_rows.iter().map(|&(w, _)| w + 1).max().unwrap_or(0);
    let mut week_month = vec![0u8; n_weeks];
    for (w, m) in month_rows {
        week_month[w] = m;
    }
    if week_month.iter().any(|&m| m == 0) {
        return Err(Error::data_msg("months.csv does not cover all weeks"));
    }
    let item_index: std::collections::HashMap<u64, usize> =
        items.ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let consumer_index: std::collections::HashMap<u64, usize> =
        consumers.ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let j_n = items.ids.len();
    let mut prices = vec![f64::NAN; j_n * n_weeks];
    for (id, week, price) in price_rows {
        let j = *item_index
            .get(&id)
            .ok_or_else(|| Error::data_msg(format!("price row references unknown item {id}")))?;
        if week >= n_weeks {
            return Err(Error::data_msg(format!("price row week {week} out of range")));
        }
        prices[j * n_weeks + week] = price;
    }
    let mut events = Vec::with_capacity(event_rows.len());
    for (c, j, t) in event_rows {
        events.push(ChoiceEvent {
            consumer: *consumer_index
                .get(&c)
                .ok_or_else(|| Error::data_msg(format!("event references unknown consumer {c}")))?,
            item: *item_index
                .get(&j)
                .ok_or_else(|| Error::data_msg(format!("event references unknown item {j}")))?,
            week: t,
        });
    }
    let panel = ChoicePanel {
        consumer_ids: consumers.ids,
        item_ids: items.ids.clone(),
        consumer_embeddings: consumers.values,
        user_dim: consumers.dim,
        item_features: items.values,
        item_dim: items.dim,
        prices,
        n_weeks,
        events,
        week_month,
        lambda_hat: vec![0.0; j_n],
    };
    panel.validate()?;
    Ok(panel)
}

pub fn write_choice_panel(dir: &Path, panel: &crate::demand::ChoicePanel) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_embeddings(
        &dir.join("consumers.emb"),
        &EmbeddingFile {
            ids: panel.consumer_ids.clone(),
            dim: panel.user_dim,
            values: panel.consumer_embeddings.clone(),
        },
    )?;
    write_embeddings(
        &dir.join("items.emb"),
        &EmbeddingFile {
            ids: panel.item_ids.clone(),
            dim: panel.item_dim,
            values: panel.item_features.clone(),
        },
    )?;
    write_prices_csv(&dir.join("prices.csv"), &panel.item_ids, &panel.prices, panel.n_weeks)?;
    let events: Vec<(u64, u64, usize)> = panel
        .events
        .iter()
        .map(|e| (panel.consumer_ids[e.consumer], panel.item_ids[e.item], e.week))
        .collect();
    write_events_csv(&dir.join("events.csv"), &events)?;
    write_months_csv(&dir.join("months.csv"), &panel.week_month)?;
    Ok(())
}

/// Reads an entire file as bytes (byte-identity checks in tests and the
/// pipeline determinism gate).
pub fn file_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn binary_embedding_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("items.emb");
        // values must be f32-representable for bit-exactness
        let values: Vec<f64> = (0..1000 * 64).map(|_| rng.random::<f32>() as f64).collect();
        let emb = EmbeddingFile {
            ids: (0..1000).collect(),
            dim: 64,
            values,
        };
        write_embeddings(&path, &emb).unwrap();
        let back = read_embeddings(&path).unwrap();
        assert_eq!(emb, back);
    }

    #[test]
    fn text_embedding_alternative_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.emb.txt");
        let emb = EmbeddingFile {
            ids: vec![10, 20],
            dim: 3,
            values: vec![1.0, 2.5, -3.0, 0.5, 0.25, 8.0],
        };
        write_embeddings_text(&path, &emb).unwrap();
        let back = read_embeddings(&path).unwrap();
        assert_eq!(emb, back);
    }

    #[test]
    fn malformed_event_row_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.csv");
        std::fs::write(&path, "consumer_id,item_id,week\n1,2,0\n3,oops,1\n").unwrap();
        let err = read_events_csv(&path).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
    }

    #[test]
    fn events_daily_round_trip() {
        use crate::eventstudy::{EventPanel, EventRow, EventSeries};
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events_daily.csv");
        let panel = EventPanel {
            units: vec![EventSeries {
                unit_id: 3,
                rows: (0..10u32)
                    .map(|d| EventRow {
                        day: d,
                        count: (d % 4) as u64,
                        month: 1 + (d % 12) as u8,
                        dow: (d % 7) as u8,
                        period: if d > 6 { Some(0) } else { None },
                        discount: d % 5 == 0,
                    })
                    .collect(),
            }],
            period_labels: vec!["Lockdown".into()],
        };
        write_events_daily_csv(&path, &panel).unwrap();
        let back = read_events_daily_csv(&path).unwrap();
        assert_eq!(back.units.len(), 1);
        assert_eq!(back.units[0].rows.len(), 10);
        assert_eq!(back.period_labels, vec!["Lockdown".to_string()]);
        assert_eq!(back.units[0].rows[7].period, Some(0));
    }
}
