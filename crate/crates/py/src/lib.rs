//! Python bindings: tokens, envelopes, the scenario world and the reports.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use assured_core::authorization::{
    build_envelope, decode_token, issue_token, verify_token, AuthorizationToken, Constraints, UpdateEnvelope,
};
use assured_core::crypto::{self, PublicKey, SigningKeyPair};
use assured_core::harness::{self, BenchMode, RunOptions, Scenario, World};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn value_err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// OEM signing key.
#[pyclass(name = "OemKey", module = "assured")]
pub struct PyOemKey {
    key: SigningKeyPair,
}

#[pymethods]
impl PyOemKey {
    /// Deterministic key from an integer seed.
    #[new]
    fn new(seed: u64) -> Self {
        Self { key: SigningKeyPair::generate(&mut ChaCha20Rng::seed_from_u64(seed)) }
    }

    fn public<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.key.public().0)
    }

    #[pyo3(signature = (artifact, version, model=0, device=0, prev=0))]
    fn issue(&self, artifact: &[u8], version: u64, model: u64, device: u64, prev: u64) -> PyResult<PyEnvelope> {
        let c = Constraints::new(model, device, prev, version).map_err(value_err)?;
        let token = issue_token(&self.key, artifact, c).map_err(value_err)?;
        Ok(PyEnvelope { env: build_envelope(token, artifact.to_vec()) })
    }
}

/// 136-byte authorization token.
#[pyclass(name = "Token", module = "assured", skip_from_py_object)]
#[derive(Clone)]
pub struct PyToken {
    token: AuthorizationToken,
}

#[pymethods]
impl PyToken {
    #[staticmethod]
    fn from_bytes(bytes: &[u8]) -> PyResult<Self> {
        Ok(Self { token: decode_token(bytes).map_err(value_err)? })
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.token.encode())
    }

    #[getter]
    fn artifact_hash<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.token.artifact_hash.0)
    }

    #[getter]
    fn artifact_size(&self) -> u64 {
        self.token.artifact_size
    }

    #[getter]
    fn device_model(&self) -> u64 {
        self.token.constraints.device_model
    }

    #[getter]
    fn device_id(&self) -> u64 {
        self.token.constraints.device_id
    }

    #[getter]
    fn required_prev_version(&self) -> u64 {
        self.token.constraints.required_prev_version
    }

    #[getter]
    fn new_version(&self) -> u64 {
        self.token.constraints.new_version
    }

    /// Raises ValueError naming the rejection when the token does not verify.
    fn verify(&self, oem_public: &[u8], artifact: &[u8]) -> PyResult<()> {
        let pk = PublicKey::from_slice(oem_public).ok_or_else(|| PyValueError::new_err("public key must be 32 bytes"))?;
        verify_token(&pk, artifact, &self.token).map_err(|r| PyValueError::new_err(r.name()))
    }

    fn __len__(&self) -> usize {
        self.token.encode().len()
    }
}

/// Token plus artifact.
#[pyclass(name = "Envelope", module = "assured")]
pub struct PyEnvelope {
    env: UpdateEnvelope,
}

#[pymethods]
impl PyEnvelope {
    #[staticmethod]
    fn parse(bytes: &[u8]) -> PyResult<Self> {
        Ok(Self { env: UpdateEnvelope::parse(bytes).map_err(value_err)? })
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.env.serialize())
    }

    #[getter]
    fn token(&self) -> PyToken {
        PyToken { token: self.env.token }
    }

    #[getter]
    fn artifact<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.env.artifact)
    }
}

/// A scenario world driven one script line at a time.
#[pyclass(name = "Simulation", module = "assured", unsendable)]
pub struct PySimulation {
    world: World,
}

#[pymethods]
impl PySimulation {
    #[new]
    #[pyo3(signature = (seed=1))]
    fn new(seed: u64) -> Self {
        Self { world: World::new(&RunOptions::in_process(seed)) }
    }

    /// Run one scenario line and return its outcome string.
    fn step(&mut self, line: &str) -> PyResult<String> {
        let s = Scenario::parse("python", line).map_err(value_err)?;
        let step = s.steps.first().ok_or_else(|| PyValueError::new_err("empty step"))?;
        self.world.step(step).map(|(outcome, _)| outcome).map_err(PyRuntimeError::new_err)
    }

    fn device_stats<'py>(&mut self, py: Python<'py>, name: &str) -> PyResult<Bound<'py, PyDict>> {
        let s = self
            .world
            .device_stats(name)
            .ok_or_else(|| PyValueError::new_err(format!("unknown device {name}")))?;
        let d = PyDict::new(py);
        d.set_item("updates_received", s.updates_received)?;
        d.set_item("update_verifications", s.update_verifications)?;
        d.set_item("token_bytes", s.token_bytes)?;
        d.set_item("channel_overhead_bytes", s.channel_overhead_bytes)?;
        d.set_item("repository_metadata_bytes", s.repository_metadata_bytes)?;
        d.set_item("fixed_format_parses", s.fixed_format_parses)?;
        d.set_item("json_parses", s.json_parses)?;
        d.set_item("flash_writes", s.flash_writes)?;
        Ok(d)
    }
}

/// Run a scenario script; returns (passed, rendered transcript).
#[pyfunction]
#[pyo3(signature = (text, seed=1, name="python"))]
fn run_scenario(text: &str, seed: u64, name: &str) -> PyResult<(bool, String)> {
    let s = Scenario::parse(name, text).map_err(value_err)?;
    let t = harness::run_scenario(&s, &RunOptions::in_process(seed)).map_err(value_err)?;
    Ok((t.passed(), t.render()))
}

/// Built-in scenario names and scripts.
#[pyfunction]
fn builtin_scenarios() -> Vec<(String, String)> {
    harness::scripts::ALL.iter().map(|(n, t)| (n.to_string(), t.to_string())).collect()
}

/// Benchmark report as JSON lines (first line is the summary record).
#[pyfunction]
#[pyo3(signature = (mode="assured", seed=1))]
fn bench(mode: &str, seed: u64) -> PyResult<String> {
    let mode = match mode {
        "assured" => BenchMode::Assured,
        "tuf" => BenchMode::TufOnDevice,
        other => return Err(PyValueError::new_err(format!("unknown mode {other}"))),
    };
    Ok(harness::run_bench(mode, seed).map_err(value_err)?.to_json_lines())
}

/// Rows of (attack, layer, observed, detected).
#[pyfunction]
#[pyo3(signature = (seed=1))]
fn adversary_suite(seed: u64) -> PyResult<Vec<(String, String, String, bool)>> {
    Ok(harness::run_adversary_suite(seed)
        .map_err(value_err)?
        .into_iter()
        .map(|r| (r.attack, r.layer, r.observed, r.detected))
        .collect())
}

#[pyfunction]
fn sha256<'py>(py: Python<'py>, data: &[u8]) -> Bound<'py, PyBytes> {
    PyBytes::new(py, &crypto::hash(data).0)
}

/// Public-key verifications performed on this thread so far.
#[pyfunction]
fn verification_count() -> u64 {
    crypto::verification_count()
}

#[pymodule]
pub mod assured {
    #[pymodule_export]
    use super::{
        adversary_suite, bench, builtin_scenarios, run_scenario, sha256, verification_count, PyEnvelope, PyOemKey,
        PySimulation, PyToken,
    };

    #[pymodule_export]
    const TOKEN_LEN: usize = assured_core::authorization::TOKEN_LEN;
}
