//! File catalog: pfn-keyed metadata, replica locations and group usage.
//!
//! The catalog lives in the same [`Store`] as the request tables. File ids
//! are the rowids of the metadata table.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tablestore::{
    ColumnKind, IndexSpec, OwnerId, Predicate, Projection, RowId, ScanStats, Store, StoreError,
    TableId, TableSchema,
};

pub const METADATA_TABLE: &str = "Cns_file_metadata";
pub const REPLICA_TABLE: &str = "Cns_file_replica";
pub const USAGE_INDEX: &str = "usage_by_group";

const NAMESERVER: OwnerId = OwnerId(2);

pub type FileId = RowId;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Replica {
    pub pool: String,
    pub fs: String,
}

impl Replica {
    pub fn new(pool: impl Into<String>, fs: impl Into<String>) -> Self {
        Self {
            pool: pool.into(),
            fs: fs.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileMetadata {
    pub fileid: FileId,
    pub pfn: String,
    pub gid: i64,
    pub filesize: i64,
    pub replicas: Vec<Replica>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NamespaceError {
    #[error("pfn `{0}` is already registered")]
    DuplicatePfn(String),
    #[error("NOT_FOUND: {0}")]
    NotFound(String),
    #[error("file `{0}` needs at least one replica")]
    NoReplicas(String),
    #[error("replica {}:{} is not a known pool filesystem", .0.pool, .0.fs)]
    UnknownFilesystem(Replica),
    #[error("negative file size {0}")]
    NegativeSize(i64),
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub fn metadata_schema() -> TableSchema {
    TableSchema::new(METADATA_TABLE)
        .column("pfn", ColumnKind::Text)
        .column("gid", ColumnKind::Integer)
        .column("filesize", ColumnKind::Integer)
}

pub fn replica_schema() -> TableSchema {
    TableSchema::new(REPLICA_TABLE)
        .column("fileid", ColumnKind::Integer)
        .column("pool", ColumnKind::Text)
        .column("fs", ColumnKind::Text)
}

pub fn usage_index() -> IndexSpec {
    IndexSpec::new(USAGE_INDEX, ["gid", "filesize"])
}

#[derive(Debug, Clone)]
pub struct Catalog {
    meta: TableId,
    replicas: TableId,
    filesystems: Option<BTreeSet<Replica>>,
}

impl Catalog {
    /// Creates the catalog tables (with their pfn and fileid indices).
    pub fn create(store: &mut Store) -> Result<Self, NamespaceError> {
        let meta = store.create_table(metadata_schema())?;
        store.add_index(meta, IndexSpec::new("pfn_idx", ["pfn"]))?;
        let replicas = store.create_table(replica_schema())?;
        store.add_index(replicas, IndexSpec::new("replica_fileid", ["fileid"]))?;
        Ok(Self {
            meta,
            replicas,
            filesystems: None,
        })
    }

    /// Binds to catalog tables already present in `store` (e.g. a snapshot).
    pub fn attach(store: &Store) -> Result<Self, NamespaceError> {
        Ok(Self {
            meta: store.table_id(METADATA_TABLE)?,
            replicas: store.table_id(REPLICA_TABLE)?,
            filesystems: None,
        })
    }

    /// Restricts replicas to the given pool filesystems.
    pub fn with_filesystems(mut self, fs: impl IntoIterator<Item = Replica>) -> Self {
        self.filesystems = Some(fs.into_iter().collect());
        self
    }

    pub fn metadata_table(&self) -> TableId {
        self.meta
    }

    pub fn install_usage_index(&self, store: &mut Store) -> Result<(), NamespaceError> {
        store.add_index(self.meta, usage_index())?;
        Ok(())
    }

    pub fn len(&self, store: &Store) -> usize {
        store.len(self.meta).unwrap_or(0)
    }

    pub fn is_empty(&self, store: &Store) -> bool {
        self.len(store) == 0
    }

    pub fn register_file(
        &self,
        store: &mut Store,
        pfn: &str,
        gid: i64,
        filesize: i64,
        replicas: &[Replica],
    ) -> Result<FileId, NamespaceError> {
        if filesize < 0 {
            return Err(NamespaceError::NegativeSize(filesize));
        }
        if replicas.is_empty() {
            return Err(NamespaceError::NoReplicas(pfn.to_owned()));
        }
        if let Some(known) = &self.filesystems {
            if let Some(r) = replicas.iter().find(|r| !known.contains(*r)) {
                return Err(NamespaceError::UnknownFilesystem(r.clone()));
            }
        }
        let probe = store.select(
            self.meta,
            &Predicate::all().eq("pfn", pfn),
            &Projection::columns(["rowid"]),
        )?;
        if !probe.rows.is_empty() {
            return Err(NamespaceError::DuplicatePfn(pfn.to_owned()));
        }
        let fileid = store.insert(
            self.meta,
            NAMESERVER,
            vec![pfn.into(), gid.into(), filesize.into()],
        )?;
        for r in replicas {
            store.insert(
                self.replicas,
                NAMESERVER,
                vec![(fileid as i64).into(), r.pool.as_str().into(), r.fs.as_str().into()],
            )?;
        }
        Ok(fileid)
    }

    /// Resolves `pfn`; the stats cover both the metadata and replica probes.
    pub fn lookup(
        &self,
        store: &Store,
        pfn: &str,
    ) -> Result<(FileMetadata, ScanStats), NamespaceError> {
        let sel = store.select(self.meta, &Predicate::all().eq("pfn", pfn), &Projection::All)?;
        let mut stats = sel.stats;
        let Some((fileid, row)) = sel.rows.into_iter().next() else {
            return Err(NamespaceError::NotFound(pfn.to_owned()));
        };
        let reps = store.select(
            self.replicas,
            &Predicate::all().eq("fileid", fileid as i64),
            &Projection::All,
        )?;
        stats.merge(&reps.stats);
        let replicas = reps
            .rows
            .iter()
            .map(|(_, r)| Replica::new(r[1].as_text().unwrap_or(""), r[2].as_text().unwrap_or("")))
            .collect();
        Ok((
            FileMetadata {
                fileid,
                pfn: pfn.to_owned(),
                gid: row[1].as_int().unwrap_or(0),
                filesize: row[2].as_int().unwrap_or(0),
                replicas,
            },
            stats,
        ))
    }

    /// `SELECT gid, SUM(filesize) FROM Cns_file_metadata GROUP BY gid`.
    pub fn usage_by_group(
        &self,
        store: &Store,
    ) -> Result<(BTreeMap<i64, i64>, ScanStats), NamespaceError> {
        let (sums, stats) = store.group_sum(self.meta, &Predicate::all(), "gid", "filesize")?;
        let map = sums
            .into_iter()
            .map(|(k, v)| (k.as_int().unwrap_or(0), v))
            .collect();
        Ok((map, stats))
    }

    pub fn files(&self, store: &Store) -> Result<Vec<FileMetadata>, NamespaceError> {
        let mut by_id: BTreeMap<FileId, FileMetadata> = BTreeMap::new();
        for (fileid, row) in store.rows(self.meta)? {
            by_id.insert(
                fileid,
                FileMetadata {
                    fileid,
                    pfn: row[0].as_text().unwrap_or("").to_owned(),
                    gid: row[1].as_int().unwrap_or(0),
                    filesize: row[2].as_int().unwrap_or(0),
                    replicas: Vec::new(),
                },
            );
        }
        for (_, row) in store.rows(self.replicas)? {
            let id = row[0].as_int().unwrap_or(0) as FileId;
            if let Some(f) = by_id.get_mut(&id) {
                f.replicas.push(Replica::new(
                    row[1].as_text().unwrap_or(""),
                    row[2].as_text().unwrap_or(""),
                ));
            }
        }
        Ok(by_id.into_values().collect())
    }
}

/// One line of the bootstrap file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub pfn: String,
    pub gid: i64,
    pub filesize: i64,
    pub replica: Replica,
}

pub const CATALOG_HEADER: &str = "pfn\tgid\tfilesize\tpool\tfs";

#[derive(Debug, Error)]
pub enum CatalogFileError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn write_catalog<W: Write>(entries: &[CatalogEntry], mut w: W) -> io::Result<()> {
    writeln!(w, "{CATALOG_HEADER}")?;
    for e in entries {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}",
            e.pfn, e.gid, e.filesize, e.replica.pool, e.replica.fs
        )?;
    }
    Ok(())
}

pub fn read_catalog<R: BufRead>(r: R) -> Result<Vec<CatalogEntry>, CatalogFileError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let line_no = i + 1;
        if line.is_empty() || (line_no == 1 && line == CATALOG_HEADER) {
            continue;
        }
        let perr = |message: &str| CatalogFileError::Parse {
            line: line_no,
            message: message.to_owned(),
        };
        let f: Vec<&str> = line.split('\t').collect();
        let [pfn, gid, size, pool, fs] = f[..] else {
            return Err(perr("expected 5 tab-separated fields"));
        };
        out.push(CatalogEntry {
            pfn: pfn.to_owned(),
            gid: gid.parse().map_err(|_| perr("bad gid"))?,
            filesize: size.parse().map_err(|_| perr("bad filesize"))?,
            replica: Replica::new(pool, fs),
        });
    }
    Ok(out)
}

/// Registers bootstrap entries; consecutive lines with the same pfn add
/// replicas to one file.
pub fn load_entries(
    catalog: &Catalog,
    store: &mut Store,
    entries: &[CatalogEntry],
) -> Result<usize, NamespaceError> {
    let mut n = 0;
    let mut i = 0;
    while i < entries.len() {
        let first = &entries[i];
        let mut j = i + 1;
        while j < entries.len() && entries[j].pfn == first.pfn {
            j += 1;
        }
        let reps: Vec<Replica> = entries[i..j].iter().map(|e| e.replica.clone()).collect();
        catalog.register_file(store, &first.pfn, first.gid, first.filesize, &reps)?;
        n += 1;
        i = j;
    }
    Ok(n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSpec {
    pub n_files: usize,
    pub n_groups: u32,
    pub file_size: i64,
    pub replicas_per_file: usize,
}

/// Generates a catalog with one or more replicas per file placed uniformly at
/// random over `filesystems` (distinct within a file).
pub fn seed_catalog(spec: &SeedSpec, filesystems: &[Replica], seed: u64) -> Vec<CatalogEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = spec.replicas_per_file.clamp(1, filesystems.len().max(1));
    let mut out = Vec::with_capacity(spec.n_files * k);
    if filesystems.is_empty() {
        return out;
    }
    for i in 0..spec.n_files {
        let pfn = format!("/dpm/site/home/atlas/aod/file{i:07}.root");
        let gid = i64::from(rng.gen_range(0..spec.n_groups.max(1)));
        for rep in filesystems.choose_multiple(&mut rng, k) {
            out.push(CatalogEntry {
                pfn: pfn.clone(),
                gid,
                filesize: spec.file_size,
                replica: rep.clone(),
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop, prop_assert_eq, proptest};

    fn rep(p: &str) -> Vec<Replica> {
        vec![Replica::new(p, "fs1")]
    }

    fn fresh() -> (Store, Catalog) {
        let mut s = Store::new();
        let c = Catalog::create(&mut s).unwrap();
        (s, c)
    }

    #[test]
    fn first_file_gets_id_one_and_duplicates_fail() {
        let (mut s, c) = fresh();
        assert_eq!(c.register_file(&mut s, "/a", 1, 10, &rep("p1")).unwrap(), 1);
        assert_eq!(
            c.register_file(&mut s, "/a", 1, 10, &rep("p1")),
            Err(NamespaceError::DuplicatePfn("/a".into()))
        );
        assert!(matches!(
            c.register_file(&mut s, "/b", 1, 10, &[]),
            Err(NamespaceError::NoReplicas(_))
        ));
    }

    #[test]
    fn lookup_round_trips() {
        let (mut s, c) = fresh();
        let reps = vec![Replica::new("p1", "fs1"), Replica::new("p2", "fs3")];
        let id = c.register_file(&mut s, "/x", 7, 1234, &reps).unwrap();
        let (m, _) = c.lookup(&s, "/x").unwrap();
        assert_eq!(
            m,
            FileMetadata {
                fileid: id,
                pfn: "/x".into(),
                gid: 7,
                filesize: 1234,
                replicas: reps
            }
        );
        assert_eq!(c.lookup(&s, "/y").unwrap_err(), NamespaceError::NotFound("/y".into()));
    }

    #[test]
    fn unknown_filesystem_rejected() {
        let (mut s, c) = fresh();
        let c = c.with_filesystems([Replica::new("p1", "fs1")]);
        assert!(matches!(
            c.register_file(&mut s, "/x", 1, 1, &[Replica::new("p9", "fs1")]),
            Err(NamespaceError::UnknownFilesystem(_))
        ));
    }

    #[test]
    fn hundred_thousand_files_resolve_through_pfn_index() {
        let (mut s, c) = fresh();
        let n = 100_000;
        for i in 0..n {
            c.register_file(&mut s, &format!("/f{i}"), 1, 1, &rep("p")).unwrap();
        }
        // candidates (1 + 1) plus two log2 descents of 17
        let bound = 2 + 2 * 17;
        for i in (0..n).step_by(997) {
            let (m, stats) = c.lookup(&s, &format!("/f{i}")).unwrap();
            assert_eq!(m.fileid, i as u64 + 1);
            assert!(stats.rows_scanned <= bound, "{stats:?}");
        }
    }

    #[test]
    fn usage_small_examples() {
        let (mut s, c) = fresh();
        assert!(c.usage_by_group(&s).unwrap().0.is_empty());
        c.register_file(&mut s, "/1", 1, 100, &rep("p")).unwrap();
        c.register_file(&mut s, "/2", 1, 50, &rep("p")).unwrap();
        c.register_file(&mut s, "/3", 2, 7, &rep("p")).unwrap();
        let (u, stats) = c.usage_by_group(&s).unwrap();
        assert_eq!(u, BTreeMap::from([(1, 150), (2, 7)]));
        assert!(!stats.covering);
        assert_eq!(stats.rows_scanned, 3);
    }

    fn brute_force(files: &[(i64, i64)]) -> BTreeMap<i64, i64> {
        let mut m = BTreeMap::new();
        for (g, sz) in files {
            *m.entry(*g).or_insert(0) += sz;
        }
        m
    }

    #[test]
    fn ten_thousand_file_catalog_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let files: Vec<(i64, i64)> = (0..10_000)
            .map(|_| (rng.gen_range(0..20), rng.gen_range(0..1_000_000)))
            .collect();
        let (mut s, c) = fresh();
        for (i, (g, sz)) in files.iter().enumerate() {
            c.register_file(&mut s, &format!("/f{i}"), *g, *sz, &rep("p")).unwrap();
        }
        c.install_usage_index(&mut s).unwrap();
        let (u, stats) = c.usage_by_group(&s).unwrap();
        assert_eq!(u, brute_force(&files));
        assert!(stats.covering);
        assert_eq!(stats.rows_scanned, 50);
    }

    proptest! {
        #[test]
        fn usage_independent_of_index(files in prop::collection::vec((0i64..6, 0i64..1000), 0..200)) {
            let (mut a, ca) = fresh();
            let (mut b, cb) = fresh();
            cb.install_usage_index(&mut b).unwrap();
            for (i, (g, sz)) in files.iter().enumerate() {
                ca.register_file(&mut a, &format!("/f{i}"), *g, *sz, &rep("p")).unwrap();
                cb.register_file(&mut b, &format!("/f{i}"), *g, *sz, &rep("p")).unwrap();
            }
            let ua = ca.usage_by_group(&a).unwrap().0;
            let ub = cb.usage_by_group(&b).unwrap().0;
            prop_assert_eq!(&ua, &ub);
            prop_assert_eq!(ua.values().sum::<i64>(), files.iter().map(|f| f.1).sum::<i64>());
        }
    }

    #[test]
    fn bootstrap_file_round_trip() {
        let fs: Vec<Replica> = (0..3).map(|i| Replica::new(format!("pool{i}"), "fs1")).collect();
        let spec = SeedSpec {
            n_files: 5,
            n_groups: 2,
            file_size: 100,
            replicas_per_file: 2,
        };
        let entries = seed_catalog(&spec, &fs, 9);
        assert_eq!(entries.len(), 10);
        assert_eq!(entries, seed_catalog(&spec, &fs, 9));
        let mut buf = Vec::new();
        write_catalog(&entries, &mut buf).unwrap();
        assert_eq!(read_catalog(&buf[..]).unwrap(), entries);

        let (mut s, c) = fresh();
        assert_eq!(load_entries(&c, &mut s, &entries).unwrap(), 5);
        let files = c.files(&s).unwrap();
        assert!(files.iter().all(|f| f.replicas.len() == 2 && f.replicas[0] != f.replicas[1]));
    }

    #[test]
    fn empty_catalog_file_has_header() {
        let mut buf = Vec::new();
        write_catalog(&[], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), format!("{CATALOG_HEADER}\n"));
        assert!(read_catalog("a\tb\n".as_bytes()).is_err());
    }
}
