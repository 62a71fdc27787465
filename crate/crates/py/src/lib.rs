//! Python bindings: the split primitives, key helpers, a simulated
//! cluster, scenario runs, and the collusion analyzer.

use pyo3::prelude::*;

#[pymodule]
mod pds {
    use std::collections::BTreeMap;

    use pyo3::exceptions::{PyRuntimeError, PyValueError};
    use pyo3::prelude::*;
    use pyo3::types::PyBytes;
    use rand::rngs::OsRng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    use pds_core::keyspace::{self, Address, Identity, KeyReference, MasterKey};
    use pds_core::nodes::{NodeDump, OpOutcome, PnCommand};
    use pds_core::protocol::Metadata;
    use pds_core::secret_split::{self, Chunk, PrivateData};
    use pds_core::sim_harness::adversary::{attempt_reconstruction, AdversaryView};
    use pds_core::sim_harness::scenario::{RunOptions, Scenario};
    use pds_core::sim_harness::{ClusterSpec, SimCluster};

    fn value_err(e: impl std::fmt::Display) -> PyErr {
        PyValueError::new_err(e.to_string())
    }

    fn to_py<'py, T: serde::Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
        let text = serde_json::to_string(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        py.import("json")?.call_method1("loads", (text,))
    }

    /// Splits `data` into `n` chunks. Seeded runs are reproducible.
    #[pyfunction]
    #[pyo3(signature = (data, n, seed=None))]
    fn split<'py>(py: Python<'py>, data: &[u8], n: usize, seed: Option<u64>) -> PyResult<Vec<Bound<'py, PyBytes>>> {
        let pd = PrivateData::new(data.to_vec()).map_err(value_err)?;
        let chunks = match seed {
            Some(s) => secret_split::split(&pd, n, &mut ChaCha20Rng::seed_from_u64(s)),
            None => secret_split::split(&pd, n, &mut OsRng),
        }
        .map_err(value_err)?;
        Ok(chunks.iter().map(|c| PyBytes::new(py, &c.bytes)).collect())
    }

    /// Recombines a complete split, given in index order.
    #[pyfunction]
    fn recombine<'py>(py: Python<'py>, chunks: Vec<Vec<u8>>) -> PyResult<Bound<'py, PyBytes>> {
        let total = chunks.len();
        let chunks: Vec<Chunk> = chunks.into_iter().enumerate().map(|(i, bytes)| Chunk { bytes, index: i + 1, total }).collect();
        let pd = secret_split::recombine(&chunks).map_err(value_err)?;
        Ok(PyBytes::new(py, pd.as_bytes()))
    }

    /// A fresh random 16-byte key, as 32 hex digits.
    #[pyfunction]
    fn gen_key() -> String {
        keyspace::encode_hex(&keyspace::gen_key(&mut OsRng))
    }

    /// `(pn_location, kr_digest)` for a key reference in hex.
    #[pyfunction]
    fn make_hkr(kr: &str, pn_location: &str) -> PyResult<(String, String)> {
        let kr: KeyReference = kr.parse().map_err(value_err)?;
        let loc = Address::new(pn_location).map_err(value_err)?;
        let h = keyspace::make_hkr(&kr, &loc);
        Ok((h.pn_location.as_str().to_string(), h.kr_digest))
    }

    /// Runs a scenario given as JSON text and returns its report. With
    /// `audit`, the report carries the leak findings.
    #[pyfunction]
    #[pyo3(signature = (scenario, seed=None, audit=false))]
    fn run_scenario<'py>(py: Python<'py>, scenario: &str, seed: Option<u64>, audit: bool) -> PyResult<Bound<'py, PyAny>> {
        let s = Scenario::from_json(scenario).map_err(value_err)?;
        let run = s.run(&RunOptions { seed, data_dir: None, audit }).map_err(value_err)?;
        to_py(py, &run.report)
    }

    /// What a coalition learns about the item stored under `target`.
    /// `dumps` are node dumps as JSON text, e.g. from `Cluster.dumps()`.
    #[pyfunction]
    fn collude<'py>(py: Python<'py>, dumps: Vec<String>, nodes: Vec<String>, target: &str) -> PyResult<Bound<'py, PyAny>> {
        let mk: MasterKey = target.parse().map_err(value_err)?;
        let dumps: Vec<NodeDump> = dumps.iter().map(|d| serde_json::from_str(d)).collect::<Result<_, _>>().map_err(value_err)?;
        let ids: Vec<&str> = nodes.iter().map(String::as_str).collect();
        let view = AdversaryView::select(&dumps, &ids).map_err(value_err)?;
        let r = attempt_reconstruction(&view, &mk);
        let out = to_py(py, &r)?;
        out.set_item("bytes", r.bytes.as_ref().map(|b| PyBytes::new(py, b)))?;
        Ok(out)
    }

    /// An in-memory cluster on the simulated network: `an`, `in`,
    /// `sn1..snN`, and `pn-<name>` for each processor name.
    #[pyclass(unsendable)]
    struct Cluster {
        inner: SimCluster,
    }

    #[pymethods]
    impl Cluster {
        #[new]
        #[pyo3(signature = (names, storage=3, seed=0))]
        fn new(names: Vec<String>, storage: usize, seed: u64) -> PyResult<Self> {
            let names: Vec<&str> = names.iter().map(String::as_str).collect();
            let inner = SimCluster::new(ClusterSpec::standard(storage, &names, seed)).map_err(value_err)?;
            Ok(Self { inner })
        }

        fn node_ids(&self) -> Vec<String> {
            self.inner.nodes().map(|n| n.address().as_str().to_string()).collect()
        }

        #[pyo3(signature = (actor, alias, data, md=None, chunks=None))]
        fn store<'py>(
            &mut self,
            py: Python<'py>,
            actor: &str,
            alias: &str,
            data: &[u8],
            md: Option<BTreeMap<String, String>>,
            chunks: Option<usize>,
        ) -> PyResult<Bound<'py, PyAny>> {
            let md = Metadata(md.unwrap_or_default().into_iter().collect());
            self.op(py, actor, PnCommand::Store { alias: alias.into(), data: data.to_vec(), md, chunks })
        }

        /// The data behind `alias` as bytes; raises on any other outcome.
        fn read<'py>(&mut self, py: Python<'py>, actor: &str, alias: &str) -> PyResult<Bound<'py, PyBytes>> {
            match self.inner.run_op(actor, PnCommand::Retrieve { alias: alias.into() }).map_err(value_err)? {
                OpOutcome::Retrieved { data } => Ok(PyBytes::new(py, &data)),
                other => Err(PyRuntimeError::new_err(serde_json::to_string(&other).unwrap_or_default())),
            }
        }

        fn retrieve<'py>(&mut self, py: Python<'py>, actor: &str, alias: &str) -> PyResult<Bound<'py, PyAny>> {
            self.op(py, actor, PnCommand::Retrieve { alias: alias.into() })
        }

        fn update<'py>(&mut self, py: Python<'py>, actor: &str, alias: &str, data: &[u8]) -> PyResult<Bound<'py, PyAny>> {
            self.op(py, actor, PnCommand::Update { alias: alias.into(), data: data.to_vec() })
        }

        fn delete<'py>(&mut self, py: Python<'py>, actor: &str, alias: &str) -> PyResult<Bound<'py, PyAny>> {
            self.op(py, actor, PnCommand::Delete { alias: alias.into() })
        }

        /// Grants the processor `to`, hosted at node `at`.
        fn share<'py>(&mut self, py: Python<'py>, actor: &str, alias: &str, to: &str, at: &str) -> PyResult<Bound<'py, PyAny>> {
            let to = Identity::new(to, Address::new(at).map_err(value_err)?).map_err(value_err)?;
            self.op(py, actor, PnCommand::Share { alias: alias.into(), to })
        }

        fn revoke<'py>(&mut self, py: Python<'py>, actor: &str, alias: &str, from: &str) -> PyResult<Bound<'py, PyAny>> {
            self.op(py, actor, PnCommand::Revoke { alias: alias.into(), from: from.into() })
        }

        fn restart(&mut self, id: &str) -> PyResult<()> {
            self.inner.restart(id).map_err(value_err)
        }

        /// Node dumps as JSON text, one per node.
        fn dumps(&self) -> PyResult<Vec<String>> {
            self.inner.dumps().iter().map(|d| serde_json::to_string(d).map_err(value_err)).collect()
        }

        fn messages(&self) -> usize {
            self.inner.transcript().len()
        }
    }

    impl Cluster {
        fn op<'py>(&mut self, py: Python<'py>, actor: &str, cmd: PnCommand) -> PyResult<Bound<'py, PyAny>> {
            let outcome = self.inner.run_op(actor, cmd).map_err(value_err)?;
            to_py(py, &outcome)
        }
    }
}
