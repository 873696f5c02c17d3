use std::fs;
use std::path::Path;

use ahnet::eval::froc::write_froc_csv;
use ahnet::eval::{FrocPoint, DEFAULT_FP_GRID};
use ahnet::experiment::{froc_csv, Model, LOSS_STAGE1, LOSS_STAGE2};
use ahnet::nets::{build_ahnet, build_mcgcn};
use ahnet::report::report;
use ahnet::{Checkpoint, Error, NetConfig};

#[test]
fn manifest_lists_every_parameter_and_buffer() {
    let net = NetConfig::desk();
    for g in [build_mcgcn(&net, 0).unwrap(), build_ahnet(&net, 0, None).unwrap().0] {
        let ck = Checkpoint::from_store(&g.params);
        let m = ck.manifest();
        assert_eq!(m.len(), g.params.iter().count());
        for (e, (name, t)) in m.iter().zip(g.params.iter()) {
            assert_eq!(&e.name, name);
            assert_eq!(e.shape, t.shape());
            assert_eq!(e.length, 4 * t.len());
        }
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back.to_bytes().unwrap(), ck.to_bytes().unwrap());
    }
}

#[test]
fn empty_run_directory_lists_what_is_missing() {
    let dir = tempfile::tempdir().unwrap();
    match report(dir.path()) {
        Err(Error::MissingArtifacts(m)) => {
            for f in [LOSS_STAGE1, LOSS_STAGE2, "froc_ahnet.csv", "froc_mcgcn.csv"] {
                assert!(m.iter().any(|p| p.ends_with(f)), "{f} not in {m:?}");
            }
        }
        other => panic!("expected missing artifacts, got {other:?}"),
    }
}

fn populate(dir: &Path) {
    let loss = "stage,epoch,step,objective,loss,base_loss\nstage1,0,0,l2,2,2\nstage1,0,1,l2,1.5,1.5\n";
    fs::write(dir.join(LOSS_STAGE1), loss).unwrap();
    fs::write(dir.join(LOSS_STAGE2), loss.replace("stage1", "stage2")).unwrap();
    for (m, k) in [(Model::Ahnet, 0.9), (Model::Mcgcn, 0.6)] {
        let pts: Vec<FrocPoint> = DEFAULT_FP_GRID
            .iter()
            .map(|&g| FrocPoint {
                fp_per_volume: g,
                tpr: k * (1.0 - g),
            })
            .collect();
        let mut f = fs::File::create(dir.join(froc_csv(m))).unwrap();
        write_froc_csv(&mut f, &pts).unwrap();
    }
}

#[test]
fn report_has_the_grid_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    populate(dir.path());
    let first = report(dir.path()).unwrap();
    let snapshot: Vec<Vec<u8>> = first.written.iter().map(|p| fs::read(p).unwrap()).collect();
    let table = fs::read_to_string(dir.path().join("froc.csv")).unwrap();
    let mut lines = table.lines();
    assert_eq!(lines.next(), Some("model,FP=0.01,FP=0.05,FP=0.1,FP=0.15,FP=0.2,FP=0.25"));
    assert!(lines.next().unwrap().starts_with("ahnet,0.8910,"));
    assert!(lines.next().unwrap().starts_with("mcgcn,"));

    let again = report(dir.path()).unwrap();
    assert_eq!(again.written, first.written);
    let now: Vec<Vec<u8>> = again.written.iter().map(|p| fs::read(p).unwrap()).collect();
    assert_eq!(now, snapshot);
}
