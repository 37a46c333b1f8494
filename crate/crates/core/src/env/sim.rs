use super::{ActionFault, EnvError, EnvState, Replay, StepOutcome, WebEnvironment};
use crate::env::SiteSpec;
use crate::model::{Action, Observation, QueryRecord, Terminal, Trajectory};

impl SiteSpec {
    /// Observation function: the page tree plus any pending banner line.
    pub fn observe(&self, state: &EnvState) -> Result<Observation, EnvError> {
        let page = self.page(&state.current_page)?;
        Ok(match &state.banner {
            Some(banner) => Observation::new(format!("{}\n{banner}", page.tree_text.trim_end())),
            None => Observation::new(page.tree_text.clone()),
        })
    }

    pub fn reset(&self, q: &QueryRecord) -> Result<(EnvState, Observation), EnvError> {
        if q.site != self.site_id {
            return Err(EnvError::UnknownSite(format!(
                "query {} targets site '{}', not '{}'",
                q.query_id, q.site, self.site_id
            )));
        }
        if !self.pages.contains_key(&self.start_page) {
            return Err(EnvError::UnknownSite(format!(
                "{}: start page '{}' is not defined",
                self.site_id, self.start_page
            )));
        }
        let state = EnvState {
            site_id: self.site_id.clone(),
            current_page: self.start_page.clone(),
            history: Vec::new(),
            step_count: 0,
            stopped: false,
            banner: None,
        };
        let obs = self.observe(&state)?;
        Ok((state, obs))
    }

    /// Transition function. Never mutates `state`; faults that the agent
    /// should see come back as banner observations, not errors.
    pub fn step(&self, state: &EnvState, action: &Action) -> Result<StepOutcome, EnvError> {
        if state.site_id != self.site_id {
            return Err(EnvError::UnknownSite(state.site_id.clone()));
        }
        let page = self.page(&state.current_page)?;
        let mut next = state.clone();
        if state.stopped {
            let observation = self.observe(&next)?;
            return Ok(StepOutcome {
                state: next,
                observation,
                fault: Some(ActionFault::EpisodeOver),
            });
        }
        next.step_count += 1;
        next.banner = None;

        let fault = match action {
            Action::Click { element_id } | Action::Type { element_id, .. } => {
                if !page.elements.contains_key(element_id) {
                    Some(ActionFault::InvalidElement {
                        element_id: *element_id,
                    })
                } else if let Some(t) = self.transition(&state.current_page, action) {
                    next.history.push(state.current_page.clone());
                    next.current_page = t.to.clone();
                    None
                } else {
                    Some(ActionFault::NoEffect {
                        action: action.render(),
                    })
                }
            }
            Action::Scroll(dir) => {
                if let Some(target) = page.scroll.get(&(*dir).into()) {
                    next.current_page = target.clone();
                }
                None
            }
            Action::GoBack => match next.history.pop() {
                Some(prev) => {
                    next.current_page = prev;
                    None
                }
                None => Some(ActionFault::EmptyHistory),
            },
            Action::Restart => {
                next.history.clear();
                next.current_page = self.start_page.clone();
                None
            }
            Action::Stop { .. } => {
                next.stopped = true;
                None
            }
        };
        next.banner = fault.as_ref().map(ActionFault::banner);
        let observation = self.observe(&next)?;
        Ok(StepOutcome {
            state: next,
            observation,
            fault,
        })
    }

    /// Execute `actions` from reset, collecting every state and observation.
    pub fn replay<'a>(
        &self,
        q: &QueryRecord,
        actions: impl IntoIterator<Item = &'a Action>,
    ) -> Result<Replay, EnvError> {
        let (state, obs) = self.reset(q)?;
        let mut replay = Replay {
            states: vec![state],
            observations: vec![obs],
            faults: vec![],
        };
        for action in actions {
            let outcome = self.step(replay.states.last().expect("non-empty"), action)?;
            replay.states.push(outcome.state);
            replay.observations.push(outcome.observation);
            replay.faults.push(outcome.fault);
        }
        Ok(replay)
    }

    /// Rule-based reward: the trajectory stopped and the query's predicate
    /// holds on the page where it stopped and on its answer.
    pub fn is_success(&self, q: &QueryRecord, traj: &Trajectory) -> Result<bool, EnvError> {
        let pred = self.predicate(&q.query_id)?;
        if traj.terminal != Terminal::Stopped {
            return Ok(false);
        }
        let Some(answer) = traj.final_answer() else {
            return Ok(false);
        };
        let replay = self.replay(q, traj.actions())?;
        let final_page = &replay.states.last().expect("non-empty").current_page;
        Ok(pred.holds(final_page, answer))
    }
}

impl WebEnvironment for SiteSpec {
    type State = EnvState;

    fn site_id(&self) -> &str {
        &self.site_id
    }

    fn reset(&self, q: &QueryRecord) -> Result<(EnvState, Observation), EnvError> {
        SiteSpec::reset(self, q)
    }

    fn step(&self, state: &EnvState, action: &Action) -> Result<StepOutcome, EnvError> {
        SiteSpec::step(self, state, action)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Provenance, Step, Thought};

    pub(crate) fn shop() -> SiteSpec {
        SiteSpec::from_json(
            r#"{
            "site_id": "shop",
            "start_page": "home",
            "pages": {
                "home": {"tree_text": "[1] RootWebArea 'Shop'\n[2] link 'Deals'\n[3] searchbox 'Search'\n[4] link 'Phones'\n[5] StaticText 'Welcome'",
                         "elements": {"1": "static", "2": "clickable", "3": "typable", "4": "clickable", "5": "static"},
                         "scroll": {"down": "home_footer"}},
                "home_footer": {"tree_text": "[1] RootWebArea 'Shop'\n[6] link 'Contact'", "elements": {"1": "static", "6": "clickable"}},
                "results": {"tree_text": "[1] RootWebArea 'Phones'\n[2] link 'iPhone 16'", "elements": {"1": "static", "2": "clickable"}},
                "iphone": {"tree_text": "[1] RootWebArea 'iPhone 16'\n[2] StaticText 'From $799'", "elements": {"1": "static", "2": "static"}},
                "deals": {"tree_text": "[1] RootWebArea 'Deals'\n[2] StaticText 'No deals today'", "elements": {"1": "static", "2": "static"}}
            },
            "transitions": [
                {"from": "home", "click": 4, "to": "results"},
                {"from": "home", "click": 2, "to": "deals"},
                {"from": "home", "type": 3, "content": "iphone*", "to": "results"},
                {"from": "results", "click": 2, "to": "iphone"}
            ],
            "success": {
                "q1": {"answer_contains": ["$799"]},
                "q2": {"final_page": "deals"}
            }
        }"#,
        )
        .unwrap()
    }

    fn q1() -> QueryRecord {
        QueryRecord::new("q1", "price of iPhone 16", "shop")
    }

    #[test]
    fn reset_is_deterministic() {
        let site = shop();
        let (s1, o1) = site.reset(&q1()).unwrap();
        let (s2, o2) = site.reset(&q1()).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(o1, o2);
        assert!(o1.tree_text().contains("RootWebArea 'Shop'"));
        assert!(s1.history.is_empty());
    }

    #[test]
    fn reset_without_start_page() {
        let mut site = shop();
        site.start_page = "missing".into();
        assert!(matches!(site.reset(&q1()), Err(EnvError::UnknownSite(_))));
        let other = QueryRecord::new("x", "x", "news");
        assert!(matches!(shop().reset(&other), Err(EnvError::UnknownSite(_))));
    }

    #[test]
    fn click_then_goback() {
        let site = shop();
        let (s0, o0) = site.reset(&q1()).unwrap();
        let clicked = site.step(&s0, &Action::click(4)).unwrap();
        assert_eq!(clicked.state.current_page, "results");
        assert_eq!(clicked.state.history, vec!["home".to_string()]);
        assert!(clicked.fault.is_none());
        let back = site.step(&clicked.state, &Action::GoBack).unwrap();
        assert_eq!(back.state.current_page, "home");
        assert_eq!(back.observation.fingerprint(), o0.fingerprint());
        // input state untouched
        assert_eq!(s0.step_count, 0);
        assert_eq!(clicked.state.step_count, 1);
        assert_eq!(back.state.step_count, 2);
    }

    #[test]
    fn invalid_element_banner() {
        let site = shop();
        let (s0, o0) = site.reset(&q1()).unwrap();
        let out = site.step(&s0, &Action::click(99)).unwrap();
        assert_eq!(out.fault, Some(ActionFault::InvalidElement { element_id: 99 }));
        assert_eq!(out.state.current_page, "home");
        assert!(out.observation.tree_text().starts_with(o0.tree_text()));
        assert!(out.observation.tree_text().contains("[99]"));
        assert_ne!(out.observation, o0);
    }

    #[test]
    fn unmatched_action_on_valid_element() {
        let site = shop();
        let (s0, _) = site.reset(&q1()).unwrap();
        let out = site.step(&s0, &Action::type_text(3, "galaxy", true)).unwrap();
        assert!(matches!(out.fault, Some(ActionFault::NoEffect { .. })));
        assert_eq!(out.state.current_page, "home");
        let typed = site.step(&s0, &Action::type_text(3, "iPhone 16", true)).unwrap();
        assert_eq!(typed.state.current_page, "results");
    }

    #[test]
    fn goback_on_empty_history_warns() {
        let site = shop();
        let (s0, o0) = site.reset(&q1()).unwrap();
        let out = site.step(&s0, &Action::GoBack).unwrap();
        assert_eq!(out.fault, Some(ActionFault::EmptyHistory));
        assert_eq!(out.state.current_page, "home");
        assert_ne!(out.observation, o0);
    }

    #[test]
    fn scroll_and_restart() {
        let site = shop();
        let (s0, o0) = site.reset(&q1()).unwrap();
        let down = site.step(&s0, &Action::Scroll(crate::model::ScrollDirection::Down)).unwrap();
        assert_eq!(down.state.current_page, "home_footer");
        assert!(down.state.history.is_empty());
        let up = site.step(&s0, &Action::Scroll(crate::model::ScrollDirection::Up)).unwrap();
        assert_eq!(up.observation, o0);
        let deep = site.step(&s0, &Action::click(4)).unwrap();
        let deeper = site.step(&deep.state, &Action::click(2)).unwrap();
        let restarted = site.step(&deeper.state, &Action::Restart).unwrap();
        assert_eq!(restarted.observation, o0);
        assert!(restarted.state.history.is_empty());
    }

    #[test]
    fn stop_freezes() {
        let site = shop();
        let (s0, _) = site.reset(&q1()).unwrap();
        let stopped = site.step(&s0, &Action::stop("x")).unwrap();
        assert!(stopped.state.stopped);
        let after = site.step(&stopped.state, &Action::click(4)).unwrap();
        assert_eq!(after.fault, Some(ActionFault::EpisodeOver));
        assert_eq!(after.state, stopped.state);
    }

    fn traj(actions: &[Action], terminal: Terminal) -> Trajectory {
        let mut t = Trajectory::new(&q1());
        for a in actions {
            t.steps.push(Step::new(
                Observation::new("x"),
                Thought::new("t"),
                a.clone(),
                Provenance::SelfPlay,
                0,
            ));
        }
        t.terminal = terminal;
        t
    }

    #[test]
    fn success_rules() {
        let site = shop();
        let good = traj(
            &[Action::click(4), Action::click(2), Action::stop("$799")],
            Terminal::Stopped,
        );
        assert!(site.is_success(&q1(), &good).unwrap());
        let na = traj(&[Action::stop("N/A")], Terminal::Stopped);
        assert!(!site.is_success(&q1(), &na).unwrap());
        let limit = traj(&[Action::click(4), Action::click(2)], Terminal::StepLimit);
        assert!(!site.is_success(&q1(), &limit).unwrap());
        let q2 = QueryRecord::new("q2", "open deals", "shop");
        let mut nav = traj(&[Action::click(2), Action::stop("")], Terminal::Stopped);
        nav.query_id = "q2".into();
        assert!(site.is_success(&q2, &nav).unwrap());
        let q9 = QueryRecord::new("q9", "?", "shop");
        assert!(matches!(site.is_success(&q9, &good), Err(EnvError::UnknownQuery(_))));
    }

    #[test]
    fn reachability() {
        let site = shop();
        assert!(site.reaches_success("q1", "home").unwrap());
        assert!(site.reaches_success("q1", "results").unwrap());
        assert!(!site.reaches_success("q1", "deals").unwrap());
        assert!(!site.reaches_success("q1", "home_footer").unwrap());
        assert_eq!(
            site.success_pages("q1").unwrap().into_iter().collect::<Vec<_>>(),
            vec!["iphone".to_string()]
        );
    }

    #[test]
    fn validation_errors() {
        let mut site = shop();
        site.transitions.push(super::super::Transition {
            from: "home".into(),
            pattern: super::super::ActionPattern::Click(5),
            to: "deals".into(),
        });
        assert!(matches!(site.validate(), Err(EnvError::InvalidSite(_))));
        let mut site = shop();
        site.transitions[0].to = "nowhere".into();
        assert!(matches!(site.validate(), Err(EnvError::InvalidSite(_))));
    }
}
