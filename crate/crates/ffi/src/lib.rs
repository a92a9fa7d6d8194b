//! C interface to `drift-core`.
//!
//! All arrays are row-major `double` buffers owned by the caller. Functions
//! return a [`DriftStatus`]; on failure [`drift_last_error`] describes the
//! problem. Handles are opaque and must be released with their `_free`
//! function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use drift_core::affinity::{DriftConfig, FamilyId, FeatureTriplet};
use drift_core::drift_field::{compute_drift_field, drift_loss, DriftField};
use drift_core::mgda::{coordinate_all, QpOptions};
use drift_core::transport::{drift_step, energy_distance, ParticleCloud};
use drift_core::DriftError;
use ndarray::{Array2, Array3, ArrayView1, ArrayView2, ArrayView3};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DriftStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    NonFinite = 4,
    Io = 5,
    Panic = 6,
}

/// Drift-field settings.
pub struct DriftConfigHandle {
    cfg: DriftConfig,
}

/// A particle cloud being transported toward a fixed target sample.
pub struct DriftTransport {
    cloud: ParticleCloud,
    cfg: DriftConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &DriftError) -> DriftStatus {
    match e {
        DriftError::InvalidArgument(_) | DriftError::Config(_) | DriftError::Format(_) => DriftStatus::InvalidArgument,
        DriftError::ShapeMismatch(_) => DriftStatus::ShapeMismatch,
        DriftError::NonFinite(_) => DriftStatus::NonFinite,
        DriftError::Io(_) => DriftStatus::Io,
        DriftError::Context { source, .. } => status_of(source),
    }
}

struct Fail(DriftStatus, String);

impl From<DriftError> for Fail {
    fn from(e: DriftError) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(DriftStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> DriftStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            DriftStatus::Ok
        }
        Ok(Err(Fail(code, msg))) => {
            set_error(&msg);
            code
        }
        Err(_) => {
            set_error("internal panic");
            DriftStatus::Panic
        }
    }
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn elements(dims: &[usize]) -> Result<usize, Fail> {
    dims.iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Fail(DriftStatus::InvalidArgument, "array size overflows".into()))
}

fn config_ref<'a>(h: *const DriftConfigHandle) -> Result<&'a DriftConfig, Fail> {
    unsafe { h.as_ref() }.map(|h| &h.cfg).ok_or_else(|| null("config"))
}

/// Message of the last failed call on this thread, or an empty string. The
/// pointer stays valid until the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn drift_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Default drift-field settings.
#[no_mangle]
pub extern "C" fn drift_config_new(out: *mut *mut DriftConfigHandle) -> DriftStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let h = Box::new(DriftConfigHandle {
            cfg: DriftConfig::default(),
        });
        unsafe { *out = Box::into_raw(h) };
        Ok(())
    })
}

/// Settings from a TOML table with the keys `temperatures`, `mu_mask`,
/// `eps`, `include_mask_in_scale` and `lambda_drift`; missing keys keep
/// their defaults.
#[no_mangle]
pub unsafe extern "C" fn drift_config_from_toml(text: *const c_char, out: *mut *mut DriftConfigHandle) -> DriftStatus {
    guard(|| {
        if text.is_null() {
            return Err(null("text"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let s = CStr::from_ptr(text)
            .to_str()
            .map_err(|e| Fail(DriftStatus::InvalidArgument, e.to_string()))?;
        let cfg: DriftConfig = toml::from_str(s).map_err(|e| Fail(DriftStatus::InvalidArgument, e.to_string()))?;
        cfg.validate()?;
        *out = Box::into_raw(Box::new(DriftConfigHandle { cfg }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn drift_config_set_temperatures(
    cfg: *mut DriftConfigHandle,
    temperatures: *const f64,
    count: usize,
) -> DriftStatus {
    guard(|| {
        let h = cfg.as_mut().ok_or_else(|| null("config"))?;
        let next = DriftConfig {
            temperatures: slice(temperatures, count, "temperatures")?.to_vec(),
            ..h.cfg.clone()
        };
        next.validate()?;
        h.cfg = next;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn drift_config_free(cfg: *mut DriftConfigHandle) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Drift field of generated features `h` against positives and negatives,
/// all shaped `n x m x c`. Writes the field to `out_v` (`n*m*c` values) and
/// the global scale to `out_scale` if it is not null.
#[no_mangle]
pub unsafe extern "C" fn drift_compute_field(
    cfg: *const DriftConfigHandle,
    h: *const f64,
    u_pos: *const f64,
    u_neg: *const f64,
    n: usize,
    m: usize,
    c: usize,
    out_v: *mut f64,
    out_scale: *mut f64,
) -> DriftStatus {
    guard(|| {
        let cfg = config_ref(cfg)?;
        let len = elements(&[n, m, c])?;
        let load = |p, what| -> Result<Array3<f64>, Fail> {
            Ok(ArrayView3::from_shape((n, m, c), slice(p, len, what)?)
                .expect("length checked")
                .to_owned())
        };
        let t = FeatureTriplet::new(FamilyId::Raw, load(h, "h")?, load(u_pos, "u_pos")?, load(u_neg, "u_neg")?)?;
        let field = compute_drift_field(&t, cfg)?;
        let out = slice_mut(out_v, len, "out_v")?;
        for (o, v) in out.iter_mut().zip(field.v.iter()) {
            *o = *v;
        }
        if let Some(s) = out_scale.as_mut() {
            *s = field.scale;
        }
        Ok(())
    })
}

/// Stop-gradient drift regression on `len` normalized features and drift
/// values: writes the loss and, if `out_grad` is not null, its gradient.
#[no_mangle]
pub unsafe extern "C" fn drift_loss_value(
    h_norm: *const f64,
    v: *const f64,
    len: usize,
    out_loss: *mut f64,
    out_grad: *mut f64,
) -> DriftStatus {
    guard(|| {
        let h = ArrayView3::from_shape((1, 1, len), slice(h_norm, len, "h_norm")?).expect("1 x 1 x len");
        let field = DriftField {
            family: FamilyId::Raw,
            v: Array3::from_shape_vec((1, 1, len), slice(v, len, "v")?.to_vec()).expect("1 x 1 x len"),
            scale: 1.0,
            temperature_norms: Vec::new(),
        };
        let r = drift_loss(h, &field)?;
        *out_loss.as_mut().ok_or_else(|| null("out_loss"))? = r.loss;
        if !out_grad.is_null() {
            let g = slice_mut(out_grad, len, "out_grad")?;
            for (o, x) in g.iter_mut().zip(r.grad_h.iter()) {
                *o = *x;
            }
        }
        Ok(())
    })
}

/// MGDA coordination of `k >= 2` gradients of length `len`, stored
/// back-to-back in `grads` (`k*len` values). Gradients after the first are
/// scaled by `lambda`. Writes `k` weights to `out_alpha` and, if not null,
/// the combined gradient to `out_combined`.
#[no_mangle]
pub unsafe extern "C" fn drift_mgda_coordinate(
    grads: *const f64,
    k: usize,
    len: usize,
    lambda: f64,
    out_alpha: *mut f64,
    out_combined: *mut f64,
) -> DriftStatus {
    guard(|| {
        let all = slice(grads, elements(&[k, len])?, "grads")?;
        let views: Vec<ArrayView1<f64>> = (0..k).map(|i| ArrayView1::from(&all[i * len..(i + 1) * len])).collect();
        let (w, combined) = coordinate_all(&views, lambda, &QpOptions::default())?;
        slice_mut(out_alpha, k, "out_alpha")?.copy_from_slice(&w.alpha);
        if !out_combined.is_null() {
            slice_mut(out_combined, len, "out_combined")?.copy_from_slice(combined.as_slice().expect("contiguous"));
        }
        Ok(())
    })
}

/// Energy distance between `n` points `x` and `p` points `y` in `d`
/// dimensions.
#[no_mangle]
pub unsafe extern "C" fn drift_energy_distance(
    x: *const f64,
    n: usize,
    y: *const f64,
    p: usize,
    d: usize,
    out: *mut f64,
) -> DriftStatus {
    guard(|| {
        let xv = ArrayView2::from_shape((n, d), slice(x, elements(&[n, d])?, "x")?).expect("length checked");
        let yv = ArrayView2::from_shape((p, d), slice(y, elements(&[p, d])?, "y")?).expect("length checked");
        *out.as_mut().ok_or_else(|| null("out"))? = energy_distance(xv, yv)?;
        Ok(())
    })
}

/// Starts a transport run of `n` particles toward `p` target samples in `d`
/// dimensions. The config is copied.
#[no_mangle]
pub unsafe extern "C" fn drift_transport_new(
    cfg: *const DriftConfigHandle,
    particles: *const f64,
    n: usize,
    targets: *const f64,
    p: usize,
    d: usize,
    eta: f64,
    seed: u64,
    out: *mut *mut DriftTransport,
) -> DriftStatus {
    guard(|| {
        let cfg = config_ref(cfg)?.clone();
        if out.is_null() {
            return Err(null("out"));
        }
        let x = Array2::from_shape_vec((n, d), slice(particles, elements(&[n, d])?, "particles")?.to_vec())
            .expect("length checked");
        let y = Array2::from_shape_vec((p, d), slice(targets, elements(&[p, d])?, "targets")?.to_vec())
            .expect("length checked");
        let cloud = ParticleCloud::new(x, y, eta, seed)?;
        *out = Box::into_raw(Box::new(DriftTransport { cloud, cfg }));
        Ok(())
    })
}

/// Advances the run by `steps` drift steps and writes the energy distance
/// to the targets afterwards to `out_energy` if it is not null.
#[no_mangle]
pub unsafe extern "C" fn drift_transport_step(t: *mut DriftTransport, steps: usize, out_energy: *mut f64) -> DriftStatus {
    guard(|| {
        let t = t.as_mut().ok_or_else(|| null("transport"))?;
        let mut cloud = t.cloud.clone();
        for _ in 0..steps {
            cloud = drift_step(&cloud, &t.cfg)?;
        }
        let e = energy_distance(cloud.particles.view(), cloud.target_samples.view())?;
        t.cloud = cloud;
        if let Some(o) = out_energy.as_mut() {
            *o = e;
        }
        Ok(())
    })
}

/// Copies the current particles (`len` must equal `n*d`).
#[no_mangle]
pub unsafe extern "C" fn drift_transport_particles(t: *const DriftTransport, out: *mut f64, len: usize) -> DriftStatus {
    guard(|| {
        let t = t.as_ref().ok_or_else(|| null("transport"))?;
        let x = &t.cloud.particles;
        if len != x.len() {
            return Err(Fail(
                DriftStatus::ShapeMismatch,
                format!("buffer holds {len} values, cloud has {}", x.len()),
            ));
        }
        for (o, v) in slice_mut(out, len, "out")?.iter_mut().zip(x.iter()) {
            *o = *v;
        }
        Ok(())
    })
}

/// Steps taken so far.
#[no_mangle]
pub unsafe extern "C" fn drift_transport_step_count(t: *const DriftTransport) -> usize {
    t.as_ref().map_or(0, |t| t.cloud.step)
}

#[no_mangle]
pub unsafe extern "C" fn drift_transport_free(t: *mut DriftTransport) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}
