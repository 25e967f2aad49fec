use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use depthflow::checkpoint::Persist;
use depthflow::scout::{candidate_noises, scout_and_refine, Scorer, ScorerKind, ScoutConfig};
use depthflow::student::{SltConfig, SltParams};
use depthflow::teacher::{BackboneConfig, FlowMapModel, ToyDistribution};
use depthflow::Tensor;
use depthflow_ffi::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn models() -> (FlowMapModel<f32>, SltParams<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut teacher = FlowMapModel::<f32>::init(BackboneConfig::default(), &mut rng).unwrap();
    let mut student = SltParams::<f32>::init(SltConfig::default(), &mut rng).unwrap();
    // Fresh models start as the identity map; perturb them so outputs are informative.
    for t in teacher
        .0
        .params_mut()
        .tensors_mut()
        .chain(student.params_mut().tensors_mut())
    {
        let noise = Tensor::<f32>::randn(t.shape(), 0.05, &mut rng);
        for (v, n) in t.data_mut().iter_mut().zip(noise.data()) {
            *v += n;
        }
    }
    (teacher, student)
}

fn cpath(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(df_last_error()) }
        .to_string_lossy()
        .into_owned()
}

struct Handles {
    teacher: *mut DfTeacher,
    student: *mut DfStudent,
    mixture: *mut DfMixture,
}

impl Drop for Handles {
    fn drop(&mut self) {
        unsafe {
            df_teacher_free(self.teacher);
            df_student_free(self.student);
            df_mixture_free(self.mixture);
        }
    }
}

fn load(dir: &Path, teacher: &FlowMapModel<f32>, student: &SltParams<f32>) -> Handles {
    let (tp, sp) = (dir.join("t.dflb"), dir.join("s.dflb"));
    teacher.save(&tp).unwrap();
    student.save(&sp).unwrap();
    let mut h = Handles {
        teacher: ptr::null_mut(),
        student: ptr::null_mut(),
        mixture: ptr::null_mut(),
    };
    unsafe {
        assert_eq!(
            df_teacher_load(cpath(&tp).as_ptr(), &mut h.teacher),
            DfStatus::Ok
        );
        assert_eq!(
            df_student_load(cpath(&sp).as_ptr(), &mut h.student),
            DfStatus::Ok
        );
        assert_eq!(df_mixture_ring(8, 2.0, 0.1, &mut h.mixture), DfStatus::Ok);
    }
    h
}

#[test]
fn version_string() {
    let v = unsafe { CStr::from_ptr(df_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn samples_match_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let (teacher, student) = models();
    let h = load(dir.path(), &teacher, &student);
    assert_eq!(unsafe { df_teacher_data_dim(h.teacher) }, 2);

    let z = candidate_noises::<f32>(5, 4, 2);
    let (y, w) = (3usize, 1.5f32);
    let mut out = vec![0.0f32; 8];
    let st = unsafe {
        df_teacher_sample(
            h.teacher,
            z.data().as_ptr(),
            4,
            2,
            y as u32,
            w,
            out.as_mut_ptr(),
        )
    };
    assert_eq!(st, DfStatus::Ok);
    assert_eq!(
        out,
        teacher.one_step(&z, &[y; 4], &[w; 4]).unwrap().into_data()
    );

    let st = unsafe {
        df_student_preview(
            h.student,
            z.data().as_ptr(),
            4,
            2,
            y as u32,
            w,
            out.as_mut_ptr(),
        )
    };
    assert_eq!(st, DfStatus::Ok);
    assert_eq!(
        out,
        student.one_step(&z, &[y; 4], &[w; 4]).unwrap().into_data()
    );
}

#[test]
fn scout_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let (teacher, student) = models();
    let h = load(dir.path(), &teacher, &student);
    let dist = ToyDistribution::ring(8, 2.0, 0.1).unwrap();
    let cfg = ScoutConfig {
        n: 16,
        scorer: ScorerKind::NearestMean,
        y: 2,
        w: 1.0,
        seed: 9,
    };
    let (expected, report) = scout_and_refine(
        &student,
        &teacher,
        &Scorer::from_kind(cfg.scorer, &dist),
        &cfg,
        2,
    )
    .unwrap();

    let mut sample = [0.0f32; 2];
    let mut index = usize::MAX;
    let st = unsafe {
        df_scout_and_refine(
            h.student,
            h.teacher,
            h.mixture,
            DfScorer::NearestMean,
            16,
            2,
            1.0,
            9,
            sample.as_mut_ptr(),
            &mut index,
        )
    };
    assert_eq!(st, DfStatus::Ok);
    assert_eq!(index, report.best);
    assert_eq!(&sample[..], expected.data());
}

#[test]
fn error_codes() {
    let dir = tempfile::tempdir().unwrap();
    let mut t: *mut DfTeacher = ptr::null_mut();
    unsafe {
        assert_eq!(df_teacher_load(ptr::null(), &mut t), DfStatus::NullArgument);
        assert!(last_error().contains("path"));

        let missing = cpath(&dir.path().join("missing.dflb"));
        assert_eq!(df_teacher_load(missing.as_ptr(), &mut t), DfStatus::Io);

        let junk = dir.path().join("junk.dflb");
        std::fs::write(&junk, b"not a checkpoint").unwrap();
        assert_eq!(
            df_teacher_load(cpath(&junk).as_ptr(), &mut t),
            DfStatus::Format
        );
        assert!(last_error().contains("magic"));
        assert!(t.is_null());

        let mut bumped = b"DFLB".to_vec();
        bumped.extend_from_slice(&9u32.to_le_bytes());
        std::fs::write(&junk, &bumped).unwrap();
        assert_eq!(
            df_teacher_load(cpath(&junk).as_ptr(), &mut t),
            DfStatus::Version
        );

        // A student checkpoint is not a teacher.
        let (_, student) = models();
        let sp = dir.path().join("s.dflb");
        student.save(&sp).unwrap();
        assert_eq!(
            df_teacher_load(cpath(&sp).as_ptr(), &mut t),
            DfStatus::Format
        );

        let mut m: *mut DfMixture = ptr::null_mut();
        assert_eq!(df_mixture_ring(0, 2.0, 0.1, &mut m), DfStatus::Config);
        assert_eq!(
            df_mixture_ring(8, 2.0, 0.1, ptr::null_mut()),
            DfStatus::NullArgument
        );
    }
}

#[test]
fn bad_arguments_to_samplers() {
    let dir = tempfile::tempdir().unwrap();
    let (teacher, student) = models();
    let h = load(dir.path(), &teacher, &student);
    let z = [0.5f32; 6];
    let mut out = [0.0f32; 6];
    unsafe {
        assert_eq!(
            df_teacher_sample(ptr::null(), z.as_ptr(), 3, 2, 0, 1.0, out.as_mut_ptr()),
            DfStatus::NullArgument
        );
        assert_eq!(
            df_teacher_sample(h.teacher, z.as_ptr(), 2, 3, 0, 1.0, out.as_mut_ptr()),
            DfStatus::Dimension
        );
        assert_eq!(
            df_student_preview(h.student, z.as_ptr(), 0, 2, 0, 1.0, out.as_mut_ptr()),
            DfStatus::InvalidInput
        );
        assert_eq!(
            df_teacher_sample(h.teacher, z.as_ptr(), 3, 2, 99, 1.0, out.as_mut_ptr()),
            DfStatus::InvalidInput
        );
        assert_eq!(
            df_student_preview(h.student, z.as_ptr(), 3, 2, 0, 1.0, ptr::null_mut()),
            DfStatus::NullArgument
        );
        let mut sample = [0.0f32; 2];
        assert_eq!(
            df_scout_and_refine(
                h.student,
                h.teacher,
                h.mixture,
                DfScorer::Oracle,
                0,
                0,
                1.0,
                0,
                sample.as_mut_ptr(),
                ptr::null_mut()
            ),
            DfStatus::InvalidInput
        );
        assert_eq!(df_teacher_data_dim(ptr::null()), 0);
        df_teacher_free(ptr::null_mut());
    }
}

#[test]
fn header_declares_every_export() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = std::fs::read_to_string(root.join("include/depthflow.h")).unwrap();
    let source = std::fs::read_to_string(root.join("src/lib.rs")).unwrap();
    let exports: Vec<&str> = source
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .filter_map(|rest| rest.split('(').next())
        .collect();
    assert!(exports.len() >= 12);
    for name in exports {
        assert!(
            header.contains(&format!("{name}(")),
            "`{name}` missing from the header"
        );
    }
    for tag in [
        "DF_STATUS_OK = 0",
        "DF_STATUS_PANIC = 9",
        "DF_SCORER_PRIOR_SHELL = 2",
    ] {
        assert!(header.contains(tag), "{tag}");
    }
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("probe.c");
    std::fs::write(
        &src,
        "#include \"depthflow.h\"\nint main(void) { DfTeacher *t = 0; return df_teacher_load(\"x\", &t) == DF_STATUS_OK; }\n",
    )
    .unwrap();
    let status = match std::process::Command::new("cc")
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-fsyntax-only")
        .arg("-I")
        .arg(&header)
        .arg(&src)
        .status()
    {
        Ok(s) => s,
        Err(_) => {
            eprintln!("no C compiler on PATH; skipping");
            return;
        }
    };
    assert!(status.success());
}
