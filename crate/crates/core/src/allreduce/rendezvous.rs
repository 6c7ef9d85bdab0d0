use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{AllreduceError, Result};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Member {
    pub id: String,
    pub address: String,
}

/// A sealed generation: members in rank order and this process's rank.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Group {
    pub generation: u64,
    pub members: Vec<Member>,
    pub rank: usize,
}

impl Group {
    pub fn world_size(&self) -> usize {
        self.members.len()
    }

    pub fn addresses(&self) -> Vec<String> {
        self.members.iter().map(|m| m.address.clone()).collect()
    }
}

/// Group formation through a shared directory. Each generation `g` has a
/// directory `gen-{g}` holding one `member-{id}` file per candidate. Once the
/// member set has been stable for the settle period (and is large enough),
/// any candidate may seal it by atomically creating `SEALED`; the first
/// sealer wins and everybody adopts its member list. Ranks follow member-id
/// order.
#[derive(Debug, Clone)]
pub struct Rendezvous {
    dir: PathBuf,
    pub settle: Duration,
    pub timeout: Duration,
    pub poll: Duration,
}

impl Rendezvous {
    pub fn new(dir: impl Into<PathBuf>) -> io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self {
            dir,
            settle: Duration::from_millis(500),
            timeout: Duration::from_secs(60),
            poll: Duration::from_millis(20),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn gen_dir(&self, g: u64) -> PathBuf {
        self.dir.join(format!("gen-{g}"))
    }

    /// Announces `me` as a candidate for generation `g`.
    pub fn join(&self, g: u64, me: &Member) -> Result<()> {
        let dir = self.gen_dir(g);
        fs::create_dir_all(&dir)?;
        let tmp = dir.join(format!(".tmp-{}-{}", me.id, std::process::id()));
        fs::write(&tmp, serde_json::to_vec(me).expect("member serializes"))?;
        fs::rename(&tmp, dir.join(format!("member-{}", me.id)))?;
        Ok(())
    }

    pub fn members(&self, g: u64) -> Result<Vec<Member>> {
        let dir = self.gen_dir(g);
        let mut out = Vec::new();
        let entries = match fs::read_dir(&dir) {
            Ok(e) => e,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(out),
            Err(e) => return Err(e.into()),
        };
        for entry in entries {
            let entry = entry?;
            if entry.file_name().to_string_lossy().starts_with("member-") {
                let bytes = fs::read(entry.path())?;
                let m: Member = serde_json::from_slice(&bytes).map_err(|e| {
                    AllreduceError::Rendezvous(format!("bad member file {:?}: {e}", entry.path()))
                })?;
                out.push(m);
            }
        }
        out.sort();
        Ok(out)
    }

    pub fn sealed(&self, g: u64) -> Result<Option<Vec<Member>>> {
        match fs::read(self.gen_dir(g).join("SEALED")) {
            Ok(bytes) => serde_json::from_slice(&bytes).map(Some).map_err(|e| {
                AllreduceError::Rendezvous(format!("bad seal for generation {g}: {e}"))
            }),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    /// Highest generation with a directory, if any.
    pub fn latest_generation(&self) -> Result<Option<u64>> {
        let mut best = None;
        for entry in fs::read_dir(&self.dir)? {
            let name = entry?.file_name().to_string_lossy().into_owned();
            if let Some(g) = name
                .strip_prefix("gen-")
                .and_then(|s| s.parse::<u64>().ok())
            {
                best = best.max(Some(g));
            }
        }
        Ok(best)
    }

    /// True when somebody has already announced itself for generation `g + 1`.
    pub fn pending_join(&self, g: u64) -> bool {
        self.members(g + 1).map(|m| !m.is_empty()).unwrap_or(false)
    }

    fn try_seal(&self, g: u64, members: &[Member]) -> Result<bool> {
        let dir = self.gen_dir(g);
        let tmp = dir.join(format!(".seal-{}", std::process::id()));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&serde_json::to_vec(members).expect("members serialize"))?;
            f.sync_all()?;
        }
        // hard_link fails if SEALED exists, so exactly one sealer wins.
        let won = match fs::hard_link(&tmp, dir.join("SEALED")) {
            Ok(()) => true,
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => false,
            Err(e) => {
                let _ = fs::remove_file(&tmp);
                return Err(e.into());
            }
        };
        let _ = fs::remove_file(&tmp);
        Ok(won)
    }

    /// Waits until generation `g` is sealed. This member seals it itself once
    /// every id in `required` has joined, at least `min_members` are present,
    /// and the member set has been stable for the settle period. Pass
    /// `usize::MAX` to only ever adopt someone else's seal.
    pub fn wait_sealed(
        &self,
        g: u64,
        me: &Member,
        min_members: usize,
        required: &[String],
    ) -> Result<Group> {
        let deadline = Instant::now() + self.timeout;
        let mut last_count = usize::MAX;
        let mut stable_since = Instant::now();
        loop {
            if let Some(members) = self.sealed(g)? {
                let rank = members
                    .iter()
                    .position(|m| m.id == me.id)
                    .ok_or(AllreduceError::Excluded(g))?;
                return Ok(Group {
                    generation: g,
                    members,
                    rank,
                });
            }
            let members = self.members(g)?;
            if members.len() != last_count {
                last_count = members.len();
                stable_since = Instant::now();
            }
            let present = members.iter().any(|m| m.id == me.id);
            let complete = required.iter().all(|r| members.iter().any(|m| &m.id == r));
            if present
                && complete
                && members.len() >= min_members.max(1)
                && stable_since.elapsed() >= self.settle
            {
                self.try_seal(g, &members)?;
                continue;
            }
            if Instant::now() >= deadline {
                return Err(AllreduceError::Rendezvous(format!(
                    "generation {g} not sealed after {:?} ({} of {min_members} members)",
                    self.timeout,
                    members.len()
                )));
            }
            thread::sleep(self.poll);
        }
    }
}
