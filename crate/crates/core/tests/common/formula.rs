//! An interpreter for the per-stage cost listing, kept as text so that the
//! library's hand-written arithmetic is checked against the listing itself.

use std::collections::HashMap;

use gpusched::featurize::ScheduleFeatures;

pub const LISTING: &str = r#"
compute_cost = select(inlined_calls == 0,
                      num_scalars * c1,
                      num_scalars * c3);
num_threads = num_blocks * num_threads_per_block;
points_computed = num_threads *
                  points_computed_per_thread;
compute_cost += select(inlined_calls == 0,
                (points_computed * c19),
                (points_computed * c4));
idle_core_wastage = ceil(num_tasks / num_cores)
                    / max(1, tasks_per_core);
compute_cost *= idle_core_wastage;
compute_cost /= select(inlined_calls == 0,
                1 - idle_lane_wastage, 1.f);
load_cost = num_realizations *
    (c5 * unique_global_lines_read_per_realization
  + c16 * unique_shared_lines_read_per_realization
  + c8 * unique_register_lines_read_per_realization
  + c6 * unique_global_bytes_read_per_realization
  + c20 * unique_shared_bytes_read_per_realization
  + c7 * unique_register_bytes_read_per_realization
  + c18 * unique_global_lines_read_per_thread
  + c17 * unique_shared_lines_read_per_thread
  + c2 * unique_register_lines_read_per_thread
  + c13 * unique_global_bytes_read_per_thread
  + c11 * unique_shared_bytes_read_per_thread
  + c0 * unique_register_bytes_read_per_thread)
  + c10 * num_scalars * unique_bytes_read_per_point
  + c12 * num_scalars * unique_lines_read_per_point
  + c14 * num_tasks * unique_bytes_read_per_task
  + c15 * num_tasks * unique_lines_read_per_task;
global_mem_load_cost = num_blocks *
    num_global_mem_loads_per_block;
global_mem_load_cost *= select(inlined_calls == 0,
    1.f / global_mem_load_efficiency, 1);
shared_mem_load_cost = num_blocks *
    num_shared_mem_loads_per_block;
shared_mem_load_cost *= select(inlined_calls == 0,
    1.f / shared_mem_load_efficiency, 1);
load_cost += global_mem_load_cost
          + shared_mem_load_cost;
shared_mem_store_cost = c29 * num_blocks *
    num_shared_mem_stores_per_block;
global_mem_store_cost = c21 * num_blocks *
    num_global_mem_stores_per_block;
global_mem_store_cost *= select(inlined_calls == 0,
    1.f / global_mem_store_efficiency, 1);
store_cost = shared_mem_store_cost
            + global_mem_store_cost;
cost_of_false_sharing = select(inner_parallelism > 1,
    c22 * (num_scalars) /
    max(1, global_innermost_bytes_at_task), 0.0f);
store_cost += cost_of_false_sharing;
cost_of_malloc = c24 * num_realizations;
cost_of_parallel_launches = num_productions *
    select(inner_parallelism > 1, c25, 0.0f);
cost_of_parallel_tasks = num_productions *
    (inner_parallelism - 1) * c26;
cost_of_parallelism = cost_of_parallel_tasks
    + cost_of_parallel_launches;
cost_of_working_set = working_set * c9;
cost = compute_cost + store_cost + load_cost +
       cost_of_malloc + cost_of_parallelism +
       cost_of_working_set;
"#;

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(&'static str),
}

fn lex(src: &str) -> Vec<Tok> {
    const OPS: [&str; 14] = ["+=", "*=", "/=", "==", "=", "+", "-", "*", "/", "(", ")", ",", ";", ">"];
    let b = src.as_bytes();
    let mut i = 0;
    let mut out = Vec::new();
    while i < b.len() {
        let c = b[i] as char;
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() {
            let start = i;
            while i < b.len() && (b[i].is_ascii_digit() || b[i] == b'.') {
                i += 1;
            }
            let text = src[start..i].trim_end_matches('.');
            // Float literal suffix.
            if i < b.len() && b[i] == b'f' {
                i += 1;
            }
            out.push(Tok::Num(text.parse().unwrap()));
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < b.len() && (b[i].is_ascii_alphanumeric() || b[i] == b'_') {
                i += 1;
            }
            out.push(Tok::Ident(src[start..i].to_string()));
        } else {
            let op = OPS.iter().find(|o| src[i..].starts_with(**o)).unwrap_or_else(|| panic!("bad char {c}"));
            out.push(Tok::Op(op));
            i += op.len();
        }
    }
    out
}

struct Eval<'a> {
    toks: &'a [Tok],
    pos: usize,
    env: &'a mut HashMap<String, f64>,
}

impl Eval<'_> {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }

    fn eat(&mut self, op: &str) -> bool {
        if self.peek() == Some(&Tok::Op(leak(op))) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, op: &str) {
        assert!(self.eat(op), "expected {op} at token {}", self.pos);
    }

    fn statement(&mut self) {
        let Some(Tok::Ident(name)) = self.peek().cloned() else { panic!("expected identifier") };
        self.pos += 1;
        let Some(Tok::Op(op)) = self.peek().cloned() else { panic!("expected assignment") };
        self.pos += 1;
        let v = self.comparison();
        self.expect(";");
        let old = self.env.get(&name).copied();
        let new = match op {
            "=" => v,
            "+=" => old.unwrap() + v,
            "*=" => old.unwrap() * v,
            "/=" => old.unwrap() / v,
            _ => panic!("bad assignment {op}"),
        };
        self.env.insert(name, new);
    }

    fn comparison(&mut self) -> f64 {
        let a = self.sum();
        if self.eat("==") {
            let b = self.sum();
            return f64::from(u8::from(a == b));
        }
        if self.eat(">") {
            let b = self.sum();
            return f64::from(u8::from(a > b));
        }
        a
    }

    fn sum(&mut self) -> f64 {
        let mut v = self.product();
        loop {
            if self.eat("+") {
                v += self.product();
            } else if self.eat("-") {
                v -= self.product();
            } else {
                return v;
            }
        }
    }

    fn product(&mut self) -> f64 {
        let mut v = self.atom();
        loop {
            if self.eat("*") {
                v *= self.atom();
            } else if self.eat("/") {
                v /= self.atom();
            } else {
                return v;
            }
        }
    }

    fn args(&mut self) -> Vec<f64> {
        self.expect("(");
        let mut out = vec![self.comparison()];
        while self.eat(",") {
            out.push(self.comparison());
        }
        self.expect(")");
        out
    }

    fn atom(&mut self) -> f64 {
        match self.peek().cloned() {
            Some(Tok::Num(n)) => {
                self.pos += 1;
                n
            }
            Some(Tok::Op("(")) => {
                self.pos += 1;
                let v = self.comparison();
                self.expect(")");
                v
            }
            Some(Tok::Ident(name)) => {
                self.pos += 1;
                match name.as_str() {
                    "select" => {
                        let a = self.args();
                        if a[0] != 0.0 {
                            a[1]
                        } else {
                            a[2]
                        }
                    }
                    "max" => {
                        let a = self.args();
                        a[0].max(a[1])
                    }
                    "ceil" => self.args()[0].ceil(),
                    _ => *self.env.get(&name).unwrap_or_else(|| panic!("unbound {name}")),
                }
            }
            t => panic!("unexpected token {t:?}"),
        }
    }
}

fn leak(op: &str) -> &'static str {
    ["+=", "*=", "/=", "==", "=", "+", "-", "*", "/", "(", ")", ",", ";", ">"].into_iter().find(|o| *o == op).unwrap()
}

/// Runs the listing with the given features and coefficients and returns
/// every variable it assigns.
pub fn evaluate(s: &ScheduleFeatures, c: &[f64]) -> HashMap<String, f64> {
    let mut env: HashMap<String, f64> = HashMap::new();
    for (name, v) in ScheduleFeatures::NAMES.iter().zip(s.to_vec()) {
        env.insert(name.to_string(), v);
    }
    for (i, v) in c.iter().enumerate() {
        env.insert(format!("c{i}"), *v);
    }
    let toks = lex(LISTING);
    let mut e = Eval { toks: &toks, pos: 0, env: &mut env };
    while e.pos < toks.len() {
        e.statement();
    }
    env
}

/// A random feature vector covering both branches of every `select`.
pub fn random_features(rng: &mut impl rand::Rng) -> ScheduleFeatures {
    let v: Vec<f64> = (0..ScheduleFeatures::LEN).map(|_| (rng.gen_range(0.0f64..12.0)).exp2().floor()).collect();
    let mut s = ScheduleFeatures::from_slice(&v).unwrap();
    s.idle_lane_wastage = rng.gen_range(0.0..0.97);
    s.global_mem_load_efficiency = rng.gen_range(0.01..=1.0);
    s.shared_mem_load_efficiency = rng.gen_range(0.01..=1.0);
    s.global_mem_store_efficiency = rng.gen_range(0.01..=1.0);
    s.shared_mem_store_efficiency = rng.gen_range(0.01..=1.0);
    s.num_cores = rng.gen_range(1.0f64..100.0).floor();
    s.tasks_per_core = s.num_tasks / s.num_cores;
    if rng.gen_bool(0.5) {
        s.inlined_calls = 0.0;
    }
    if rng.gen_bool(0.3) {
        s.inner_parallelism = 1.0;
    }
    if rng.gen_bool(0.2) {
        s.global_innermost_bytes_at_task = 0.0;
    }
    s
}

/// Largest relative difference between the library's stage components and
/// the listing over `count` random vectors.
pub fn compare_random(count: usize, seed: u64, unit: bool) -> f64 {
    use gpusched::costmodel::{stage_cost, NUM_COEFFS};
    use rand::{Rng, SeedableRng};

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let s = random_features(&mut rng);
        let mut c = [1.0; NUM_COEFFS];
        if !unit {
            for ci in c.iter_mut() {
                *ci = rng.gen_range(0.01..10.0);
            }
        }
        let lib = stage_cost(&s, &c).unwrap();
        let env = evaluate(&s, &c);
        for (got, key) in [
            (lib.compute, "compute_cost"),
            (lib.load, "load_cost"),
            (lib.store, "store_cost"),
            (lib.malloc, "cost_of_malloc"),
            (lib.parallelism, "cost_of_parallelism"),
            (lib.working_set, "cost_of_working_set"),
            (lib.total, "cost"),
        ] {
            let want = env[key];
            let rel = (got - want).abs() / want.abs().max(f64::MIN_POSITIVE);
            worst = worst.max(if got == want { 0.0 } else { rel });
        }
    }
    worst
}
