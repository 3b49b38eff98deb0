use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use unisrec::corpus::load_data_dirs;
use unisrec::trainer::source_instances;

fn unisrec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_unisrec"))
        .args(args)
        .env("UNISREC_LOG", "error")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SPEC: &str = "domains=3\nitems_per_domain=50\nusers_per_domain=80\ndim=12\n";
const CONF: &str = "d_v=8\nexperts=2\nlayers=1\nheads=2\nn_max=8\nbatch_size=32\nepochs=1\n";

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("spec.txt"), SPEC).unwrap();
        fs::write(dir.path().join("run.conf"), CONF).unwrap();
        let f = Self { dir };
        let out = unisrec(&[
            "--seed",
            "3",
            "synth",
            "--spec",
            s(&f.path("spec.txt")),
            "--out",
            s(&f.path("data")),
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        f
    }

    fn path(&self, name: &str) -> std::path::PathBuf {
        self.dir.path().join(name)
    }

    fn domain(&self, d: usize) -> String {
        s(&self.path("data").join(format!("domain{d}"))).to_string()
    }

    fn pretrain(&self, extra: &[&str]) -> Output {
        let (conf, out, d0, d1) = (
            self.path("run.conf"),
            self.path("pt.ckpt"),
            self.domain(0),
            self.domain(1),
        );
        let mut args = vec![
            "--seed",
            "3",
            "pretrain",
            "--config",
            s(&conf),
            "--out",
            s(&out),
            "--data",
            &d0,
            &d1,
        ];
        args.extend(extra);
        unisrec(&args)
    }

    fn finetune(&self, extra: &[&str]) -> Output {
        let (conf, d2) = (self.path("run.conf"), self.domain(2));
        let mut args = vec!["--seed", "3", "finetune", "--config", s(&conf), "--data", &d2];
        args.extend(extra);
        unisrec(&args)
    }
}

#[test]
fn synth_is_reproducible_and_round_trips_its_spec() {
    let a = Fixture::new();
    let b = Fixture::new();
    for d in 0..3 {
        for file in ["embeddings.bin", "item_index.tsv", "inters.tsv"] {
            let fa = fs::read(Path::new(&a.domain(d)).join(file)).unwrap();
            let fb = fs::read(Path::new(&b.domain(d)).join(file)).unwrap();
            assert_eq!(fa, fb, "domain{d}/{file}");
        }
    }
    // Regenerating from the written spec gives the same corpus.
    let again = a.path("again");
    let out = unisrec(&[
        "synth",
        "--spec",
        s(&a.path("data").join("spec.txt")),
        "--out",
        s(&again),
    ]);
    assert_eq!(code(&out), 0);
    assert_eq!(
        fs::read(again.join("domain1").join("inters.tsv")).unwrap(),
        fs::read(Path::new(&a.domain(1)).join("inters.tsv")).unwrap()
    );
}

#[test]
fn bad_inputs_map_to_exit_codes() {
    let f = Fixture::new();
    let missing = f.path("nope.txt");
    assert_eq!(
        code(&unisrec(&["synth", "--spec", s(&missing), "--out", s(&f.path("x"))])),
        2
    );
    assert_eq!(code(&unisrec(&["no-such-command"])), 2);

    fs::write(f.path("bad.conf"), "d_v=8\nlearning_rate=3\n").unwrap();
    let out = unisrec(&["gradcheck", "--config", s(&f.path("bad.conf"))]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));

    // Fine-tuning without a checkpoint needs the explicit from-scratch flag.
    assert_eq!(code(&f.finetune(&["--report", s(&f.path("r.tsv"))])), 3);
}

#[test]
fn pretrain_pools_source_domains_and_resumes() {
    let f = Fixture::new();
    let out = f.pretrain(&[]);
    assert_eq!(code(&out), 0);
    let (_, seqs) = load_data_dirs(&[f.domain(0), f.domain(1)]).unwrap();
    let expected = source_instances(&seqs, 8).len();
    assert!(
        stdout(&out).contains(&format!("instances\t{expected}\n")),
        "{}",
        stdout(&out)
    );

    // `epochs` is the total target: resuming a one-epoch checkpoint under a
    // two-epoch configuration equals an uninterrupted two-epoch run.
    fs::write(f.path("run.conf"), CONF.replace("epochs=1", "epochs=2")).unwrap();
    let once = fs::read(f.path("pt.ckpt")).unwrap();
    assert_eq!(code(&f.pretrain(&["--resume"])), 0);
    let resumed = fs::read(f.path("pt.ckpt")).unwrap();
    assert!(once != resumed);
    fs::remove_file(f.path("pt.ckpt")).unwrap();
    assert_eq!(code(&f.pretrain(&[])), 0);
    assert!(
        fs::read(f.path("pt.ckpt")).unwrap() == resumed,
        "resumed run differs from an uninterrupted one"
    );
}

#[test]
fn finetune_reports_and_modes() {
    let f = Fixture::new();
    assert_eq!(code(&f.pretrain(&[])), 0);
    let ckpt = f.path("pt.ckpt");
    let (ind, tra) = (f.path("ind.tsv"), f.path("tra.tsv"));
    let ranks = f.path("ranks.txt");
    let out = f.finetune(&[
        "--ckpt",
        s(&ckpt),
        "--report",
        s(&ind),
        "--ranks-out",
        s(&ranks),
        "--out",
        s(&f.path("ft.ckpt")),
    ]);
    assert_eq!(code(&out), 0);
    let report = fs::read_to_string(&ind).unwrap();
    let rows: Vec<&str> = report.lines().skip(1).collect();
    assert_eq!(rows.len(), 4, "{report}");
    assert!(f.path("ft.ckpt").exists());

    let out = f.finetune(&[
        "--ckpt",
        s(&ckpt),
        "--mode",
        "transductive",
        "--report",
        s(&tra),
        "--baseline-ranks",
        s(&ranks),
    ]);
    assert_eq!(code(&out), 0);
    let other = fs::read_to_string(&tra).unwrap();
    assert_eq!(other.lines().count(), report.lines().count());
    assert_ne!(other, report);
    assert!(stdout(&out).contains("bucket\t"));

    let eval_out = f.path("eval.ckpt");
    let out = f.finetune(&[
        "--ckpt",
        s(&ckpt),
        "--eval-only",
        "--report",
        s(&f.path("e.tsv")),
        "--out",
        s(&eval_out),
    ]);
    assert_eq!(code(&out), 0);
    assert!(!eval_out.exists());
}

#[test]
fn gradcheck_exit_status() {
    assert_eq!(code(&unisrec(&["gradcheck"])), 0);
    assert_eq!(code(&unisrec(&["gradcheck", "--corrupt-grad", "1.01"])), 1);
}
