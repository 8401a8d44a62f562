//! A deliberately plain re-implementation of the prototype head over nested
//! `Vec`s, used as an oracle for the tape-based version.

#![allow(dead_code)]

pub struct NaiveConfig {
    pub temperature: f64,
    pub window: usize,
    /// `None` selects the dynamic thresholds.
    pub fixed_threshold: Option<f64>,
    pub top_k_fraction: f64,
    pub cosine: bool,
    pub logit_scale: f64,
    pub global_prototype: bool,
}

pub struct NaiveOutput {
    pub fg_prob: Vec<f64>,
    pub s_fg: Vec<f64>,
    pub s_bg: Vec<f64>,
}

/// `feat[c][y][x]`.
pub type Feat = Vec<Vec<Vec<f64>>>;

fn pooled(mask: &[Vec<bool>], window: usize) -> Vec<Vec<f64>> {
    let h = mask.len() / window;
    let w = mask[0].len() / window;
    let mut out = vec![vec![0.0; w]; h];
    for (cy, row) in out.iter_mut().enumerate() {
        for (cx, v) in row.iter_mut().enumerate() {
            let mut n = 0usize;
            for dy in 0..window {
                for dx in 0..window {
                    if mask[cy * window + dy][cx * window + dx] {
                        n += 1;
                    }
                }
            }
            *v = n as f64 / (window * window) as f64;
        }
    }
    out
}

fn column(feat: &Feat, y: usize, x: usize) -> Vec<f64> {
    feat.iter().map(|ch| ch[y][x]).collect()
}

fn centered(v: &[f64]) -> Vec<f64> {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| x - m).collect()
}

fn similarity(a: &[f64], b: &[f64], cosine: bool) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    if cosine {
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb + 1e-8)
    } else {
        dot
    }
}

fn bag(feat: &Feat, mask: &[Vec<bool>], cfg: &NaiveConfig, foreground: bool) -> Vec<Vec<f64>> {
    let p = pooled(mask, cfg.window);
    let all: Vec<f64> = p.iter().flatten().copied().collect();
    let tau = match cfg.fixed_threshold {
        Some(t) => t,
        None if foreground => 0.8 * all.iter().cloned().fold(0.0, f64::max),
        None => all.iter().sum::<f64>() / all.len() as f64,
    };
    let mut out = Vec::new();
    for (y, row) in p.iter().enumerate() {
        for (x, &v) in row.iter().enumerate() {
            if v > tau {
                out.push(column(feat, y, x));
            }
        }
    }
    if foreground && cfg.global_prototype {
        let total: f64 = all.iter().sum();
        let mut g = vec![0.0; feat.len()];
        if total > 0.0 {
            for (y, row) in p.iter().enumerate() {
                for (x, &v) in row.iter().enumerate() {
                    for (c, gc) in g.iter_mut().enumerate() {
                        *gc += v * feat[c][y][x] / total;
                    }
                }
            }
        }
        out.push(g);
    }
    out
}

fn branch_score(protos: &[Vec<f64>], q: &[f64], cfg: &NaiveConfig) -> f64 {
    let protos: Vec<Vec<f64>> = protos.iter().map(|p| centered(p)).collect();
    let n = protos.len();
    let corr: Vec<f64> = protos.iter().map(|p| similarity(q, p, cfg.cosine)).collect();
    let k = ((cfg.top_k_fraction * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| corr[b].partial_cmp(&corr[a]).unwrap().then(a.cmp(&b)));
    let kept = &order[..k];
    let mx = kept
        .iter()
        .map(|&j| corr[j] / cfg.temperature)
        .fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = kept.iter().map(|&j| (corr[j] / cfg.temperature - mx).exp()).sum();
    let mut agg = vec![0.0; q.len()];
    for &j in kept {
        let w = (corr[j] / cfg.temperature - mx).exp() / z;
        for (a, p) in agg.iter_mut().zip(&protos[j]) {
            *a += w * p;
        }
    }
    similarity(&agg, q, cfg.cosine)
}

/// `mask` is at `window` times the feature extent.
pub fn naive_head(support: &Feat, mask: &[Vec<bool>], query: &Feat, cfg: &NaiveConfig) -> NaiveOutput {
    let inverted: Vec<Vec<bool>> = mask.iter().map(|r| r.iter().map(|b| !b).collect()).collect();
    let fg = bag(support, mask, cfg, true);
    let bg = bag(support, &inverted, cfg, false);
    assert!(!fg.is_empty() && !bg.is_empty(), "degenerate oracle input");
    let (h, w) = (query[0].len(), query[0][0].len());
    let mut out = NaiveOutput {
        fg_prob: Vec::new(),
        s_fg: Vec::new(),
        s_bg: Vec::new(),
    };
    for y in 0..h {
        for x in 0..w {
            let q = centered(&column(query, y, x));
            let sf = branch_score(&fg, &q, cfg);
            let sb = branch_score(&bg, &q, cfg);
            let a = cfg.logit_scale;
            out.fg_prob.push(1.0 / (1.0 + (a * sb - a * sf).exp()));
            out.s_fg.push(sf);
            out.s_bg.push(sb);
        }
    }
    out
}
