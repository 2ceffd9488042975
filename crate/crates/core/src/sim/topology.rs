use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::BluetoothAddress;
use crate::messages::PrincipalId;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TopologyError {
    #[error("unknown device {0}")]
    UnknownDevice(PrincipalId),
    #[error("unknown location {0:?}")]
    UnknownLocation(String),
    #[error("device {0} placed twice")]
    DuplicateDevice(PrincipalId),
}

/// Where every physical device is. Proximity is same-location unless extra
/// location pairs are declared adjacent.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    locations: BTreeSet<String>,
    placement: BTreeMap<PrincipalId, String>,
    addresses: BTreeMap<PrincipalId, BluetoothAddress>,
    adjacent: BTreeSet<(String, String)>,
}

impl Topology {
    pub fn new<I, S>(locations: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            locations: locations.into_iter().map(Into::into).collect(),
            ..Self::default()
        }
    }

    pub fn add_location(&mut self, name: impl Into<String>) {
        self.locations.insert(name.into());
    }

    /// Declares two distinct locations mutually in radio range.
    pub fn connect(&mut self, a: &str, b: &str) -> Result<(), TopologyError> {
        for l in [a, b] {
            if !self.locations.contains(l) {
                return Err(TopologyError::UnknownLocation(l.to_owned()));
            }
        }
        self.adjacent.insert((a.to_owned(), b.to_owned()));
        self.adjacent.insert((b.to_owned(), a.to_owned()));
        Ok(())
    }

    pub fn place(
        &mut self,
        device: PrincipalId,
        location: &str,
        address: Option<BluetoothAddress>,
    ) -> Result<(), TopologyError> {
        if !self.locations.contains(location) {
            return Err(TopologyError::UnknownLocation(location.to_owned()));
        }
        if self.placement.contains_key(&device) {
            return Err(TopologyError::DuplicateDevice(device));
        }
        if let Some(a) = address {
            self.addresses.insert(device.clone(), a);
        }
        self.placement.insert(device, location.to_owned());
        Ok(())
    }

    pub fn move_device(
        &mut self,
        device: &PrincipalId,
        location: &str,
    ) -> Result<(), TopologyError> {
        if !self.locations.contains(location) {
            return Err(TopologyError::UnknownLocation(location.to_owned()));
        }
        let slot = self
            .placement
            .get_mut(device)
            .ok_or_else(|| TopologyError::UnknownDevice(device.clone()))?;
        *slot = location.to_owned();
        Ok(())
    }

    pub fn location_of(&self, device: &PrincipalId) -> Option<&str> {
        self.placement.get(device).map(String::as_str)
    }

    pub fn address_of(&self, device: &PrincipalId) -> Option<BluetoothAddress> {
        self.addresses.get(device).copied()
    }

    pub fn is_placed(&self, device: &PrincipalId) -> bool {
        self.placement.contains_key(device)
    }

    pub fn proximate(&self, a: &PrincipalId, b: &PrincipalId) -> bool {
        match (self.placement.get(a), self.placement.get(b)) {
            (Some(la), Some(lb)) => la == lb || self.adjacent.contains(&(la.clone(), lb.clone())),
            _ => false,
        }
    }

    /// SEARCH: is any device advertising `target` within range of `scanner`?
    pub fn ble_search(&self, scanner: &PrincipalId, target: &BluetoothAddress) -> bool {
        self.addresses
            .iter()
            .filter(|(_, addr)| *addr == target)
            .any(|(dev, _)| dev != scanner && self.proximate(scanner, dev))
    }
}
