use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, TomographySource, TrainSource};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use stuffml::circuits::{read_circuit, read_header, write_circuit, CircuitSampler, Fragment};
use stuffml::codec::{
    simulate, Codec, Decoder, EncoderFleet, HandScheme, NeuralScheme, SimOptions,
};
use stuffml::lattice::{build_tesselation, gate_adjacency, Tesselation};
use stuffml::oracle::{ideal_distribution, ideal_probability};
use stuffml::tomography::*;
use stuffml::training::{
    mix, single_octagon_skeletons, train_from, CircuitSource, RandomSource, SingleGateSource,
    TrainReport, TrainState,
};
use stuffml::{Error, Result};

/// Codec choice for commands that run the stuff.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SchemeArg {
    Hand,
    Checkpoint(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Command {
    Oracle {
        circuit: PathBuf,
    },
    GenCircuits,
    Simulate {
        circuit: PathBuf,
        scheme: SchemeArg,
        episodes: usize,
    },
    Train {
        resume: Option<PathBuf>,
    },
    Tomography {
        scheme: SchemeArg,
    },
    Conjecture1 {
        scheme: SchemeArg,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Oracle { .. } => "oracle",
            Command::GenCircuits => "gen-circuits",
            Command::Simulate { .. } => "simulate",
            Command::Train { .. } => "train",
            Command::Tomography { .. } => "tomography",
            Command::Conjecture1 { .. } => "conjecture1",
        }
    }
}

/// Single writer for a run directory; records a hash of every artifact.
pub struct Artifacts {
    dir: PathBuf,
    entries: Vec<(String, String)>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

impl Artifacts {
    pub fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Artifacts {
            dir: dir.to_path_buf(),
            entries: Vec::new(),
        })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(name);
        if let Some(p) = path.parent() {
            std::fs::create_dir_all(p)?;
        }
        std::fs::write(&path, bytes)?;
        self.entries.retain(|e| e.0 != name);
        self.entries.push((name.to_string(), sha256_hex(bytes)));
        Ok(path)
    }

    pub fn finish(self, cmd: &Command, cfg: &RunConfig) -> Result<PathBuf> {
        let mut s = String::from("# manifest v1\n");
        let _ = writeln!(s, "command {}", cmd.name());
        match cmd {
            Command::Oracle { circuit } | Command::Simulate { circuit, .. } => {
                let _ = writeln!(
                    s,
                    "input {} {}",
                    sha256_hex(&std::fs::read(circuit)?),
                    circuit.display()
                );
            }
            _ => {}
        }
        if let Command::Simulate {
            scheme: SchemeArg::Checkpoint(p),
            ..
        }
        | Command::Tomography {
            scheme: SchemeArg::Checkpoint(p),
        }
        | Command::Conjecture1 {
            scheme: SchemeArg::Checkpoint(p),
        }
        | Command::Train { resume: Some(p) } = cmd
        {
            let _ = writeln!(
                s,
                "input {} {}",
                sha256_hex(&std::fs::read(p)?),
                p.display()
            );
        }
        let seeds = [
            ("root", cfg.root_seed),
            ("stuff", cfg.stuff_seed),
            ("net", cfg.net_seed),
            ("train", cfg.train.seed),
            ("circuits", cfg.circuit_seed),
            ("tomography", cfg.tomography_seed),
            ("conjecture1", cfg.conjecture_seed),
        ];
        for (k, v) in seeds {
            let _ = writeln!(s, "seed {k} {v}");
        }
        for (name, hash) in &self.entries {
            let _ = writeln!(s, "artifact {hash} {name}");
        }
        s.push_str("--- config\n");
        s.push_str(&cfg.emit());
        let path = self.dir.join("manifest.txt");
        std::fs::write(&path, s)?;
        Ok(path)
    }
}

fn load_scheme(arg: &SchemeArg, tess: &Tesselation) -> Result<Box<dyn Codec>> {
    Ok(match arg {
        SchemeArg::Hand => Box::new(HandScheme::new(tess)?),
        SchemeArg::Checkpoint(p) => Box::new(Checkpoint::load(p)?.scheme),
    })
}

fn circuit_from_file(
    path: &Path,
) -> Result<(
    Tesselation,
    stuffml::lattice::GateLattice,
    stuffml::circuits::Circuit,
)> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let [l, t, px, pt, c] = read_header(&text)?;
    let tess = build_tesselation(l, t, px, pt, c)?;
    let gl = gate_adjacency(&tess);
    let circ = read_circuit(&text, &tess, &gl)?;
    Ok((tess, gl, circ))
}

pub fn new_scheme(cfg: &RunConfig, tess: &Tesselation) -> NeuralScheme {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.net_seed);
    NeuralScheme {
        fleet: EncoderFleet::random(
            tess.l_sites,
            cfg.net_alphabet,
            tess.octagon_size(),
            &cfg.hidden,
            cfg.d_m,
            &mut rng,
        ),
        decoder: Decoder::random(
            cfg.decoder,
            tess.octagon_size(),
            &cfg.decoder_hidden,
            &mut rng,
        ),
        null: cfg.null,
    }
}

/// Runs one subcommand, writing its artifacts and manifest. Returns the
/// text printed on standard output.
pub fn dispatch(cmd: &Command, cfg: &RunConfig) -> Result<String> {
    let mut art = Artifacts::new(&cfg.out_dir)?;
    let out = match cmd {
        Command::Oracle { circuit } => oracle(circuit, &mut art)?,
        Command::GenCircuits => gen_circuits(cfg, &mut art)?,
        Command::Simulate {
            circuit,
            scheme,
            episodes,
        } => simulate_cmd(cfg, circuit, scheme, *episodes, &mut art)?,
        Command::Train { resume } => train_cmd(cfg, resume.as_deref(), &mut art)?,
        Command::Tomography { scheme } => tomography_cmd(cfg, scheme, &mut art)?,
        Command::Conjecture1 { scheme } => conjecture1_cmd(cfg, scheme, &mut art)?,
    };
    art.finish(cmd, cfg)?;
    Ok(out)
}

fn oracle(path: &Path, art: &mut Artifacts) -> Result<String> {
    let (tess, gl, c) = circuit_from_file(path)?;
    let p = ideal_probability(&c, &tess, &gl)?;
    let mut s = format!("p {p:.17e}\n");
    let mut skeleton = Fragment::new();
    for (&id, &g) in c.gates() {
        skeleton.insert(id, g);
    }
    for (assignment, q) in ideal_distribution(&skeleton, &tess, &gl)?.entries {
        let a: Vec<String> = assignment
            .iter()
            .map(|(id, o)| {
                let (x, t) = tess.tessel(*id).midpoint;
                format!("({x},{t}):{o}")
            })
            .collect();
        let _ = writeln!(s, "variant {} {q:.17e}", a.join(" "));
    }
    art.write("oracle.txt", s.as_bytes())?;
    Ok(format!("p {p:.17e}\n"))
}

fn gen_circuits(cfg: &RunConfig, art: &mut Artifacts) -> Result<String> {
    let (tess, gl) = cfg.lattice()?;
    let mut sampler = CircuitSampler::new(cfg.sampler(&tess), &tess)?;
    let mut index = String::from("# file gates measurements p\n");
    for k in 0..cfg.circuit_count {
        let c = sampler.sample(&gl)?;
        let name = format!("circuits/circuit_{k:04}.txt");
        art.write(&name, write_circuit(&c, &tess).as_bytes())?;
        let p = ideal_probability(&c, &tess, &gl)?;
        let _ = writeln!(
            index,
            "{name} {} {} {p:.17e}",
            c.len(),
            c.fragment.measurement_count()
        );
    }
    art.write("circuits/index.txt", index.as_bytes())?;
    Ok(format!("wrote {} circuits\n", cfg.circuit_count))
}

fn simulate_cmd(
    cfg: &RunConfig,
    path: &Path,
    scheme: &SchemeArg,
    episodes: usize,
    art: &mut Artifacts,
) -> Result<String> {
    let (tess, _, c) = circuit_from_file(path)?;
    let codec = load_scheme(scheme, &tess)?;
    let spec = cfg.stuff();
    let mut st = spec.make(cfg.stuff_seed)?;
    let mut log = String::from("# episode target_probability outcomes\n");
    let mut total = 0.0;
    for e in 0..episodes.max(1) {
        st.reset();
        let opts = SimOptions {
            trace: e == 0,
            ..SimOptions::default()
        };
        let ep = simulate(
            codec.as_ref(),
            &mut st,
            &c,
            &tess,
            cfg.train.strategy,
            &opts,
            mix(cfg.stuff_seed, 9, e as u64),
        )?;
        let q = ep.target_probability(&c);
        total += q;
        let outs: Vec<String> = ep
            .sampled_outcomes()
            .iter()
            .map(|(id, o)| {
                let (x, t) = tess.tessel(*id).midpoint;
                format!("({x},{t}):{o}")
            })
            .collect();
        let _ = writeln!(log, "{e} {q:.6e} {}", outs.join(" "));
        if let Some(tr) = ep.trace {
            art.write("trace.txt", tr.as_bytes())?;
        }
    }
    let mean = total / episodes.max(1) as f64;
    let _ = writeln!(log, "# mean {mean:.6e}");
    art.write("simulate.txt", log.as_bytes())?;
    Ok(format!(
        "mean target probability {mean:.6e} over {} episodes\n",
        episodes.max(1)
    ))
}

fn merge(into: &mut Option<TrainReport>, part: TrainReport) {
    match into {
        None => *into = Some(part),
        Some(r) => {
            r.losses.extend(part.losses);
            let seen = r.heldout.last().map(|h| h.0);
            r.heldout
                .extend(part.heldout.into_iter().filter(|h| Some(h.0) > seen));
            r.final_heldout = part.final_heldout;
            r.iterations_run = part.iterations_run;
            r.converged = part.converged;
            r.aborted = part.aborted;
            r.seconds += part.seconds;
        }
    }
}

fn train_cmd(cfg: &RunConfig, resume: Option<&Path>, art: &mut Artifacts) -> Result<String> {
    let (tess, gl) = cfg.lattice()?;
    let (mut scheme, mut state) = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            (ck.scheme, ck.state)
        }
        None => {
            let s = new_scheme(cfg, &tess);
            let st = TrainState::new(&s, &cfg.train);
            (s, st)
        }
    };
    if scheme.fleet.alphabet != cfg.stuff_alphabet || scheme.fleet.weights.len() != tess.l_sites {
        return Err(Error::Config(
            "checkpoint does not match the configured lattice or alphabet".into(),
        ));
    }
    let heldout = single_octagon_skeletons(&tess, &gl, cfg.heldout_row)?;
    let mut single = SingleGateSource {
        tess: &tess,
        gl: &gl,
        rows: cfg.train_rows.clone(),
    };
    let mut random = RandomSource {
        sampler: CircuitSampler::new(cfg.sampler(&tess), &tess)?,
        tess: &tess,
        gl: &gl,
        require_outcome: true,
    };
    let source: &mut dyn CircuitSource = match cfg.train_source {
        TrainSource::SingleOctagon => &mut single,
        TrainSource::Random => &mut random,
    };
    let stuff = cfg.stuff();
    let chunk = if cfg.checkpoint_every == 0 {
        cfg.train.iterations
    } else {
        cfg.checkpoint_every
    };
    let mut report: Option<TrainReport> = None;
    loop {
        let end = (state.iteration + chunk.max(1)).min(cfg.train.iterations);
        let part_cfg = stuffml::training::TrainConfig {
            iterations: end,
            ..cfg.train.clone()
        };
        let part = train_from(
            &mut scheme,
            &stuff,
            &tess,
            source,
            &heldout,
            &part_cfg,
            &mut state,
        )?;
        let stop =
            part.converged || part.aborted.is_some() || state.iteration >= cfg.train.iterations;
        merge(&mut report, part);
        let ck = Checkpoint {
            config: cfg.emit(),
            scheme: scheme.clone(),
            state: state.clone(),
        };
        let mut buf = Vec::new();
        ck.write(&mut buf)?;
        if !stop {
            art.write(
                &format!("checkpoints/iter_{:08}.ckpt", state.iteration),
                &buf,
            )?;
        } else {
            art.write("scheme.ckpt", &buf)?;
            break;
        }
    }
    let mut report = report.expect("at least one chunk");
    report.config = cfg.train.echo();
    art.write("train_report.txt", report.to_text().as_bytes())?;
    Ok(format!(
        "iterations {} final_heldout {:.6e} converged {}\n",
        report.iterations_run, report.final_heldout, report.converged
    ))
}

fn tomography_cmd(cfg: &RunConfig, scheme: &SchemeArg, art: &mut Artifacts) -> Result<String> {
    let (tess, gl) = cfg.lattice()?;
    let chain = Chain::new(&tess, &gl)?;
    let codec = match cfg.tomography_source {
        TomographySource::Oracle => None,
        _ => Some(load_scheme(scheme, &tess)?),
    };
    let stuff = cfg.stuff();
    let strategy = cfg.train.strategy;
    let source = match (&codec, cfg.tomography_source) {
        (None, _) => Source::Oracle,
        (Some(c), TomographySource::Exact) => Source::Exact {
            codec: c.as_ref(),
            stuff,
            strategy,
        },
        (Some(c), _) => Source::Empirical {
            codec: c.as_ref(),
            stuff,
            strategy,
            m: cfg.tomography_m,
            seed: cfg.tomography_seed,
        },
    };
    let mut bcfg = cfg.tomography;
    if cfg.tomography_source == TomographySource::Empirical
        && bcfg.rank_tol == BoundednessConfig::default().rank_tol
    {
        bcfg.rank_tol = source.default_tolerance();
    }
    let pr = Prober::new(source, &tess, &gl);
    // Lowest spine row whose preparations fit below it.
    let spine =
        (1..chain.rows() as i64).find(|&r| Chain::is_spine(r) && chain.probes(r, r + 1).is_ok());
    let spine = spine
        .ok_or_else(|| Error::InvalidGeometry("strip too short for chain tomography".into()))?;
    let mut summary = String::new();
    let mut sets = Vec::new();
    for row in [spine, spine + 1] {
        let frs = chain.box_fragments(row)?;
        let probes = chain.probes(row, row)?;
        let (m, ts) =
            region_tomography(&pr, chain.region(row, row)?, &frs, &probes, bcfg.rank_tol)?;
        let mut text = String::new();
        for i in 0..m.nrows() {
            let row_vals: Vec<String> = m.row(i).iter().map(|v| format!("{v:.12e}")).collect();
            let _ = writeln!(text, "{}", row_vals.join(" "));
        }
        art.write(&format!("tomography/matrix_row{row}.txt"), text.as_bytes())?;
        let mut rv = format!("# omega {:?}\n", ts.omega);
        let mut worst: f64 = 0.0;
        for i in 0..m.nrows() {
            let r = r_vector(&m.row(i).iter().copied().collect::<Vec<_>>(), &ts)?;
            worst = worst.max(r.residual);
            let c: Vec<String> = r.coefficients.iter().map(|v| format!("{v:.12e}")).collect();
            let _ = writeln!(rv, "{:.3e} {}", r.residual, c.join(" "));
        }
        art.write(&format!("tomography/rvectors_row{row}.txt"), rv.as_bytes())?;
        let _ = writeln!(
            summary,
            "row {row} fragments {} probes {} omega {} degenerate {} max_residual {worst:.3e}",
            frs.len(),
            probes.len(),
            ts.size(),
            ts.degenerate
        );
        sets.push(ts);
    }
    let (ts1, ts2) = (&sets[0], &sets[1]);
    let basis: Vec<(Fragment, Fragment)> = ts1
        .fragments
        .iter()
        .flat_map(|a| ts2.fragments.iter().map(move |b| (a.clone(), b.clone())))
        .collect();
    let composites: Vec<Fragment> = basis
        .iter()
        .map(|(a, b)| a.union(b))
        .collect::<Result<_>>()?;
    let (_, ts12) = region_tomography(
        &pr,
        chain.region(spine, spine + 1)?,
        &composites,
        &chain.probes(spine, spine + 1)?,
        bcfg.rank_tol,
    )?;
    let (f1, f2) = (chain.box_fragments(spine)?, chain.box_fragments(spine + 1)?);
    let mut family = basis.clone();
    family.extend(
        f1.iter()
            .flat_map(|a| f2.iter().map(move |b| (a.clone(), b.clone())))
            .step_by(7)
            .take(20),
    );
    let lam = composition_tomograph(&pr, ts1, ts2, &ts12, &family)?;
    let mut lt = format!(
        "# omega {:?} fit_residual {:.3e} bound_holds {}\n",
        lam.omega,
        lam.fit_residual,
        lam.bound_holds()
    );
    for i in 0..lam.lambda.nrows() {
        let v: Vec<String> = lam
            .lambda
            .row(i)
            .iter()
            .map(|x| format!("{x:.12e}"))
            .collect();
        let _ = writeln!(lt, "{}", v.join(" "));
    }
    art.write("tomography/lambda.txt", lt.as_bytes())?;
    let _ = writeln!(
        summary,
        "lambda omega {:?} bound_holds {} fit_residual {:.3e}",
        lam.omega,
        lam.bound_holds(),
        lam.fit_residual
    );
    let bases: Vec<i64> = (spine - 1..spine + 3).collect();
    let mut tests =
        chain_test_family(&chain, &bases, 6, cfg.tomography_tests, cfg.tomography_seed)?;
    if cfg.tomography_long_rows > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.tomography_seed, 1, 0));
        for _ in 0..cfg.tomography_tests {
            tests.push(chain_circuit(
                &chain,
                spine - 1,
                cfg.tomography_long_rows,
                &mut rng,
            )?);
        }
    }
    let rep = verify_theorem1(&chain, &bcfg, &pr, &tests)?;
    art.write("tomography/theorem1.txt", rep.to_text().as_bytes())?;
    let _ = writeln!(
        summary,
        "reconstruction max_deviation {:.3e} boundedness_failure {}",
        rep.max_deviation, rep.flagged
    );
    art.write("tomography/summary.txt", summary.as_bytes())?;
    Ok(summary)
}

fn conjecture1_cmd(cfg: &RunConfig, scheme: &SchemeArg, art: &mut Artifacts) -> Result<String> {
    let (tess, gl) = cfg.lattice()?;
    let codec = load_scheme(scheme, &tess)?;
    let ccfg = Conjecture1Config {
        ladder: cfg.ladder.clone(),
        circuits_per_size: cfg.circuits_per_size,
        m: cfg.conjecture_m,
        epsilon: cfg.conjecture_epsilon,
        err: cfg.train.err,
        strategy: cfg.train.strategy,
        seed: cfg.conjecture_seed,
    };
    let rep = conjecture1_experiment(
        codec.as_ref(),
        &cfg.stuff(),
        &tess,
        &gl,
        cfg.sampler(&tess),
        &ccfg,
    )?;
    let text = rep.to_text();
    art.write("conjecture1.txt", text.as_bytes())?;
    Ok(text)
}
