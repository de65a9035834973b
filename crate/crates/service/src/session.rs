use std::collections::HashMap;
use std::sync::{Arc, Mutex, RwLock, TryLockError};
use std::time::{Duration, Instant};

use deform_core::LatentCode;

use crate::error::ApiError;

/// One client's editing state. Handle edits always start from `z0`.
#[derive(Debug, Clone)]
pub struct EditSession {
    pub id: String,
    pub z0: LatentCode,
    pub current: LatentCode,
    pub subdiv: usize,
    pub created: Instant,
    pub last_used: Instant,
}

/// In-memory sessions with idle expiry. Each session sits behind its own
/// lock; a request that finds it held gets a 409 instead of waiting.
#[derive(Debug)]
pub struct SessionStore {
    ttl: Duration,
    map: RwLock<HashMap<String, Arc<Mutex<EditSession>>>>,
}

impl SessionStore {
    pub fn new(ttl: Duration) -> Self {
        Self { ttl, map: RwLock::new(HashMap::new()) }
    }

    pub fn create(&self, z: LatentCode, subdiv: usize) -> EditSession {
        let now = Instant::now();
        let session = EditSession {
            id: uuid::Uuid::new_v4().to_string(),
            z0: z.clone(),
            current: z,
            subdiv,
            created: now,
            last_used: now,
        };
        self.evict_expired();
        self.map
            .write()
            .expect("session map poisoned")
            .insert(session.id.clone(), Arc::new(Mutex::new(session.clone())));
        session
    }

    pub fn get(&self, id: &str) -> Result<Arc<Mutex<EditSession>>, ApiError> {
        self.evict_expired();
        self.map
            .read()
            .expect("session map poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("unknown session {id}")))
    }

    pub fn remove(&self, id: &str) -> bool {
        self.map.write().expect("session map poisoned").remove(id).is_some()
    }

    pub fn len(&self) -> usize {
        self.map.read().expect("session map poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drop sessions idle for longer than the TTL. Sessions that are locked
    /// by a running request are in use and kept.
    pub fn evict_expired(&self) -> usize {
        let now = Instant::now();
        let mut map = self.map.write().expect("session map poisoned");
        let before = map.len();
        map.retain(|_, s| match s.try_lock() {
            Ok(s) => now.duration_since(s.last_used) < self.ttl,
            Err(_) => true,
        });
        before - map.len()
    }
}

/// Run `f` with exclusive access to the session, or fail with 409 if another
/// request holds it.
pub fn with_session<T>(
    session: &Mutex<EditSession>,
    f: impl FnOnce(&mut EditSession) -> Result<T, ApiError>,
) -> Result<T, ApiError> {
    let mut guard = match session.try_lock() {
        Ok(g) => g,
        Err(TryLockError::WouldBlock) => {
            return Err(ApiError::conflict("session is being modified by another request"))
        }
        Err(TryLockError::Poisoned(p)) => p.into_inner(),
    };
    guard.last_used = Instant::now();
    f(&mut guard)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_are_unique_and_lookup_works() {
        let store = SessionStore::new(Duration::from_secs(60));
        let a = store.create(LatentCode(vec![0.0]), 0);
        let b = store.create(LatentCode(vec![1.0]), 0);
        assert_ne!(a.id, b.id);
        assert_eq!(store.len(), 2);
        assert!(store.get(&a.id).is_ok());
        assert_eq!(store.get("nope").unwrap_err().status, axum::http::StatusCode::NOT_FOUND);
        assert!(store.remove(&a.id));
        assert!(!store.remove(&a.id));
    }

    #[test]
    fn idle_sessions_expire() {
        let store = SessionStore::new(Duration::from_millis(0));
        store.create(LatentCode(vec![0.0]), 0);
        assert_eq!(store.evict_expired(), 1);
        assert!(store.is_empty());
    }

    #[test]
    fn held_session_conflicts() {
        let store = SessionStore::new(Duration::from_secs(60));
        let s = store.create(LatentCode(vec![0.0]), 0);
        let handle = store.get(&s.id).unwrap();
        let _held = handle.lock().unwrap();
        let err = with_session(&handle, |_| Ok(())).unwrap_err();
        assert_eq!(err.status, axum::http::StatusCode::CONFLICT);
        // A held session is not evicted even past its TTL.
        let zero = SessionStore { ttl: Duration::from_millis(0), map: RwLock::new(HashMap::new()) };
        zero.map.write().unwrap().insert(s.id.clone(), handle.clone());
        assert_eq!(zero.evict_expired(), 0);
    }
}
