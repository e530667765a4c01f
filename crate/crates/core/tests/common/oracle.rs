//! Independent references: brute-force ranking metrics and a plain-`Vec<f64>`
//! forward pass that reads parameters by name.

use perconet::params::ParamSet;

/// Pairwise AUC with ties worth one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    (pairs > 0.0).then(|| wins / pairs)
}

/// 1-based rank of each candidate: higher score first, ties by position.
pub fn ranks(scores: &[f64]) -> Vec<usize> {
    (0..scores.len())
        .map(|i| {
            1 + (0..scores.len())
                .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i))
                .count()
        })
        .collect()
}

pub fn mrr(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let r = ranks(scores);
    (0..scores.len())
        .filter(|&i| labels[i] == 1)
        .map(|i| r[i])
        .min()
        .map(|best| 1.0 / best as f64)
}

pub fn ndcg(scores: &[f64], labels: &[u8], k: usize) -> Option<f64> {
    let r = ranks(scores);
    let pos = labels.iter().filter(|l| **l == 1).count();
    if pos == 0 {
        return None;
    }
    let dcg: f64 = (0..scores.len())
        .filter(|&i| labels[i] == 1 && r[i] <= k)
        .map(|i| 1.0 / ((r[i] + 1) as f64).log2())
        .sum();
    let idcg: f64 = (1..=pos.min(k)).map(|i| 1.0 / ((i + 1) as f64).log2()).sum();
    Some(dcg / idcg)
}

/// Row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct M {
    pub r: usize,
    pub c: usize,
    pub v: Vec<f64>,
}

impl M {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.v[i * self.c..(i + 1) * self.c]
    }

    fn from_rows(rows: &[Vec<f64>]) -> M {
        M {
            r: rows.len(),
            c: rows[0].len(),
            v: rows.concat(),
        }
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> M {
        M {
            r: self.r,
            c: self.c,
            v: self.v.iter().map(|x| f(*x)).collect(),
        }
    }

    fn mm(&self, o: &M) -> M {
        assert_eq!(self.c, o.r);
        let mut v = vec![0.0; self.r * o.c];
        for i in 0..self.r {
            for j in 0..o.c {
                for k in 0..self.c {
                    v[i * o.c + j] += self.v[i * self.c + k] * o.v[k * o.c + j];
                }
            }
        }
        M { r: self.r, c: o.c, v }
    }

    fn t(&self) -> M {
        let mut v = vec![0.0; self.r * self.c];
        for i in 0..self.r {
            for j in 0..self.c {
                v[j * self.r + i] = self.v[i * self.c + j];
            }
        }
        M { r: self.c, c: self.r, v }
    }

    fn plus_row(&self, b: &M) -> M {
        let mut out = self.clone();
        for i in 0..self.r {
            for j in 0..self.c {
                out.v[i * self.c + j] += b.v[j];
            }
        }
        out
    }

    fn cols(&self, s: usize, e: usize) -> M {
        M::from_rows(&(0..self.r).map(|i| self.row(i)[s..e].to_vec()).collect::<Vec<_>>())
    }

    fn softmax_rows(&self) -> M {
        let rows: Vec<Vec<f64>> = (0..self.r)
            .map(|i| {
                let row = self.row(i);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
                let s: f64 = e.iter().sum();
                e.into_iter().map(|x| x / s).collect()
            })
            .collect();
        M::from_rows(&rows)
    }
}

fn lrelu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.01 * x
    }
}

pub struct Oracle<'a> {
    pub p: &'a ParamSet<f64>,
}

/// Attention maps and output of one encoder pass.
pub struct Encoded {
    pub out: Vec<f64>,
    /// Pooling weights over entities.
    pub entity_attention: Vec<f64>,
    /// Per-entity distributions (terms or history items).
    pub inner_attention: M,
    /// Self-attention distributions, one matrix per head.
    pub self_attention: Vec<M>,
}

impl<'a> Oracle<'a> {
    pub fn w(&self, name: &str) -> M {
        let t = self.p.by_name(name).unwrap_or_else(|| panic!("no parameter {name}"));
        let s = t.shape();
        M {
            r: s[0],
            c: s[1],
            v: t.data().to_vec(),
        }
    }

    fn dense(&self, name: &str, x: &M) -> M {
        x.mm(&self.w(&format!("{name}.weight"))).plus_row(&self.w(&format!("{name}.bias")))
    }

    fn mha(&self, name: &str, x: &M, heads: usize) -> (M, Vec<M>) {
        let q = x.mm(&self.w(&format!("{name}.query")));
        let k = x.mm(&self.w(&format!("{name}.key")));
        let v = x.mm(&self.w(&format!("{name}.value")));
        let dh = x.c / heads;
        let mut outs = Vec::new();
        let mut maps = Vec::new();
        for h in 0..heads {
            let (s, e) = (h * dh, (h + 1) * dh);
            let scores = q.cols(s, e).mm(&k.cols(s, e).t()).map(|z| z / (dh as f64).sqrt());
            let a = scores.softmax_rows();
            outs.push(a.mm(&v.cols(s, e)));
            maps.push(a);
        }
        let cat: Vec<Vec<f64>> = (0..x.r)
            .map(|i| outs.iter().flat_map(|o| o.row(i).to_vec()).collect())
            .collect();
        (M::from_rows(&cat).mm(&self.w(&format!("{name}.output"))), maps)
    }

    /// `(pooled, weights)`
    fn pool(&self, name: &str, x: &M) -> (Vec<f64>, Vec<f64>) {
        let h = self.dense(&format!("{name}.proj"), x).map(f64::tanh);
        let scores = h.mm(&self.w(&format!("{name}.query"))).t().softmax_rows();
        (scores.mm(x).v, scores.v)
    }

    pub fn persona(&self, entity_ids: &[usize]) -> M {
        let table = self.w("entity.embedding");
        M::from_rows(&entity_ids.iter().map(|&e| table.row(e).to_vec()).collect::<Vec<_>>())
    }

    pub fn news(&self, tokens: &[usize], persona: &M, heads: usize) -> Encoded {
        let emb = self.w("text.embedding");
        let x = M::from_rows(&tokens.iter().map(|&t| emb.row(t).to_vec()).collect::<Vec<_>>());
        let h = self.dense("news.dense_inner", &x).map(lrelu);
        let h = self.dense("news.dense_outer", &h);
        let (terms, self_attention) = self.mha("news.mha", &h, heads);
        let e = self.dense("news.entity_proj", persona).map(lrelu);
        let alpha = e.mm(&self.w("news.bilinear")).mm(&terms.t()).softmax_rows();
        let per = alpha.mm(&terms);
        let (out, beta) = self.pool("news.pool", &per);
        Encoded {
            out,
            entity_attention: beta,
            inner_attention: alpha,
            self_attention,
        }
    }

    pub fn user(&self, news: &[Vec<f64>], persona: &M, heads: usize) -> Encoded {
        let z = M::from_rows(news);
        let (z, self_attention) = self.mha("user.mha", &z, heads);
        let e = self.dense("user.entity_proj", persona).map(lrelu);
        let w = self.w("user.pair.weight");
        let d = z.c;
        let w_e = M { r: d, c: w.c, v: w.v[..d * w.c].to_vec() };
        let w_n = M { r: d, c: w.c, v: w.v[d * w.c..].to_vec() };
        let bias = self.w("user.pair.bias");
        let q = self.w("user.pair.query");
        let (a, b) = (e.mm(&w_e), z.mm(&w_n));
        let mut scores = vec![vec![0.0; z.r]; e.r];
        for (i, row) in scores.iter_mut().enumerate() {
            for (j, s) in row.iter_mut().enumerate() {
                *s = (0..w.c)
                    .map(|c| lrelu(a.row(i)[c] + b.row(j)[c] + bias.v[c]) * q.v[c])
                    .sum();
            }
        }
        let gamma = M::from_rows(&scores).softmax_rows();
        let per = gamma.mm(&z);
        let (out, beta) = self.pool("user.pool", &per);
        Encoded {
            out,
            entity_attention: beta,
            inner_attention: gamma,
            self_attention,
        }
    }

    pub fn click_logit(&self, u: &[f64], r: &[f64]) -> f64 {
        let x = M::from_rows(&[[u, r].concat()]);
        let h = self.dense("click.hidden", &x).map(lrelu);
        h.mm(&self.w("click.query")).v[0]
    }
}
