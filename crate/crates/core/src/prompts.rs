//! Fixed prompt templates sent to the policy, verbalizer, proposer,
//! simulator, scorer and judge models.

use crate::model::Action;

pub const ENVIRONMENT_DESCRIPTION: &str = "\
You are an autonomous intelligent agent tasked with navigating a web browser. You will be given web-based tasks. These tasks will be accomplished through the use of specific actions you can issue.
Here's the information you'll have:
The user's objective: This is the task you're trying to complete.
The current observation (web page's accessibility tree): This is a simplified representation of the webpage, providing key information. Optionally, you may be provided with a screenshot of the webpage. You should pay close attention to the screenshot to make decisions.
The open tabs: These are the tabs you have open.
The previous actions: You can refer to the conversation history with the user to see the actions you have taken. It may be helpful to track your progress.

The actions you can perform are the following:
`click [id]`: This action clicks on an element with a specific id on the webpage.
`type [id] [content] [press_enter_after=0|1]`: Use this to type the content into the field with id. By default, the \"Enter\" key is pressed after typing unless press_enter_after is set to 0.
`scroll [direction=down|up]`: Scroll the page up or down.
`goback`: Navigate to the previously viewed page.
`restart`: Navigate to the original homepage at first. When you can't find information on some websites, try starting over from the beginning.
`stop [answer]`: Issue this action when you believe the task is complete. If the objective is to find a text-based answer, provide the answer in the bracket. If you believe the task is impossible to complete, provide the answer as \"N/A\" in the bracket.";

pub const AGENT_HINTS: &str = "\
To be successful, it is very important to follow the following rules:
1. If you are uncertain about the next action, follow these steps: First, generate up to three of the most likely and valid actions based on the current observation. Then, for each of these possible actions, simulate and describe the expected future outcome in free text, detailing the next observation that would result from performing the action. Next, evaluate the correctness of each action by considering both the current observation and the simulated future results. Assign a numerical score from 0 to 1 to indicate the likelihood of correctness for each action: a score of 1.0 means \"complete\", 0.5 means \"on track\", and 0 means \"incorrect\". Provide your rationale for each score before assigning it. Finally, select and output the action with the highest score from the evaluated actions.
2. You should only issue an action that is valid given the current observation. For example, you should NOT type into buttons or click on statictext.
3. You should only issue one action at a time.
4. STRICTLY Avoid repeating the same action if the webpage remains unchanged. You may have selected the wrong web element or numerical label.
5. Issue stop action when you think you have achieved the objective. Don't generate anything after stop.
6. If you ever need to login, login with Google. Try to skip any follow-up questions that may appear after logging in.
Your reply should strictly follow the format:

<think>
1. Thought: {{Your brief thoughts (briefly summarize the info that will help complete the task)}}
Possible Step: {{One of the logical and valid actions to take based on the current observation.}}
Simulated Output: {{A prediction of what the next observation or result will be after performing the action.}}
Critic Evaluation: {{Your rationale on the effectiveness of the action as well as a score from 0 (poor performance) to 1 (excellent performance), judging the corresponding action's s effectiveness.}}
2. ... (continue with subsequent steps as needed in the same format)
</think> (Optional: You can choose to include the steps between `<think>` and `</think>` if necessary or skip them based on the task's complexity.)

Thought: {{Your brief thoughts (briefly summarize the info that will help complete the task)}} Action: ```{{The final action you choose to take in the process.}}```";

/// System instructions for the acting agent.
pub fn system_prompt() -> String {
    format!("{ENVIRONMENT_DESCRIPTION}\n\n{AGENT_HINTS}")
}

/// Guidance for rewriting a step's thought as a lookahead plan.
pub fn refinement_hints(action: &Action) -> String {
    format!(
        "Please directly generate your chain of thoughts and critiques, and reasoning right before exactly choosing the given current action {action} according to the task, the navigation history/lookahead, and the current observation. Your thoughts should be focused on: What important information for the task completion can be expected after performing the current action based on the current observation within the broader navigation context? How does the current action, based on the current observation, contribute to achieving the overall task goal within the broader context of the navigation overview? How necessary is the current action based on the current observation for the task completion in the context of the overall navigation overview? Additionally, provide a detailed plan outlining the next steps after completing the current action, ensuring it aligns with the navigation overview.

Hints:
1. Be aware of the task\u{2019}s constraints while offering your insights.
2. Try to avoid mentioning the current action at the beginning of the chain of thought.
3. Write the chain of thought supposing that the given current action has not been taken, and you are giving a look-ahead of what will happen in the future.
4. Your chain of thought should be shorter as length of navigation lookahead decreases, which means you are closer to the task completion."
    )
}

/// Fields of the lookahead-verbalization prompt.
pub struct LookaheadFields<'a> {
    pub demonstration: &'a str,
    pub task: &'a str,
    pub history: &'a str,
    pub observation: &'a str,
    pub action: &'a Action,
    pub lookahead: &'a str,
}

pub fn lookahead_prompt(f: &LookaheadFields<'_>) -> String {
    format!(
        "{ENVIRONMENT_DESCRIPTION}\n\n{hints}\n\n\
Chain of Thought demonstration: {demo}\n\
The task: {task}\n\
The navigation history: {history}\n\
The current observation (web page's accessibility tree): {obs}\n\
The current action you are about to exactly choose: {action}\n\
The navigation lookahead: {lookahead}\n\n\
Please directly generate your thoughts and critiques.",
        hints = refinement_hints(f.action),
        demo = f.demonstration,
        task = f.task,
        history = f.history,
        obs = f.observation,
        action = f.action,
        lookahead = f.lookahead,
    )
}

pub const JUDGE_SYSTEM: &str = "\
As an evaluator, you will be presented with three primary components to assist you in your role:
1. Web Task Instruction: This is a clear and specific directive provided in natural language, detailing the online activity to be carried out. These requirements may include conducting searches, verifying information, comparing prices, checking availability, or any other action relevant to the specified web service (such as Amazon, Apple, ArXiv, BBC News, Booking etc).
2. Result Webpage Accessibility Tree: This is a representation of the web page showing the result or intermediate state of performing a web task. It serves as proof of the actions taken in response to the instruction.
3. Result Response: This is a textual response obtained after the execution of the web task. It serves as textual result in response to the instruction.

-- You DO NOT NEED to interact with web pages or perform actions such as booking flights or conducting searches on websites.
-- You SHOULD NOT make assumptions based on information not presented in the webpage when comparing it to the instructions.
-- Your primary responsibility is to conduct a thorough assessment of the web task instruction against the outcome depicted in the screenshot and in the response, evaluating whether the actions taken align with the given instructions.
-- NOTE that the instruction may involve more than one task, for example, locating the garage and summarizing the review. Failing to complete either task, such as not providing a summary, should be considered unsuccessful.
-- NOTE that the screenshot is authentic, but the response provided by LLM is generated at the end of web browsing, and there may be discrepancies between the text and the screenshots.
-- Note the difference:
1) Result response may contradict the screenshot, then the content of the screenshot prevails, 2) The content in the Result response is not mentioned on the screenshot, choose to believe the content.

You should elaborate on how you arrived at your final evaluation and then provide a definitive verdict on whether the task has been successfully accomplished, either as 'SUCCESS' or 'NOT SUCCESS'.";

pub fn judge_user(instruction: &str, final_tree: &str, response: &str) -> String {
    format!(
        "Web Task Instruction: {instruction}\n\n\
Result Webpage Accessibility Tree:\n{final_tree}\n\n\
Result Response: {response}"
    )
}

/// Appended to the context when asking for the next distinct candidate.
/// `prior` lists the already-proposed (thought, action) pairs.
pub fn proposal_exclusion(prior: &[(String, Action)]) -> String {
    let listed: Vec<String> = prior
        .iter()
        .enumerate()
        .map(|(i, (thought, action))| format!("{}. Thought: {thought} Action: {action}", i + 1))
        .collect();
    format!("Please generate actions different from:\n{}", listed.join("\n"))
}

pub const SIMULATION_SYSTEM: &str = "\
You are a web server. You are given the current observed accessibility tree of the web page, and an action to perform. The expected output is a short description on what the next observation is, in the form of free text.

The definitions of the actions are as follows: The actions you can perform are the following:
`click [id]`: This action clicks on an element with a specific id on the webpage.
`type [id] [content] [press_enter_after=0|1]`: Use this to type the content into the field with id. By default, the \"Enter\" key is pressed after typing unless press_enter_after is set to 0.
`scroll [direction=down|up]`: Scroll the page up or down.
`goback`: Navigate to the previously viewed page.
`restart`: Navigate to the original home page and restart the action.";

pub fn simulation_user(observation: &str, action: &Action) -> String {
    format!("Current observation:\n{observation}\n\nAction: {action}")
}

/// Follow-up turn that rolls a simulation one step further.
pub fn simulation_followup(depth: usize, predicted: &str) -> String {
    format!(
        "Predicted observation after step {depth}:\n{predicted}\n\n\
Assume the agent then takes the most likely next action. Describe the observation that follows."
    )
}

pub const SCORER_SYSTEM: &str = "\
You are an evaluator of a web agent task, evaluating the correctness of the action, conditioned on the current observation and a simulated future result.
You are given the task query, the current observed accessibility tree, the action performed, and a textual description of the simulated output after performing this action.
You are expected to give a numerical score (0 to 1) to indicate whether the simulated output is correct. The higher the score, the more likely the action is correct.

Here are some example scores: complete (1.0), on track (0.5), or incorrect (0).
Output your rationale first and then the score.

Output format:
Thought: XXXX. Score: {a score from 0 to 1}.";

pub fn scorer_user(task: &str, observation: &str, action: &Action, simulation: &str) -> String {
    format!(
        "Task: {task}\n\nCurrent observation:\n{observation}\n\nAction: {action}\n\n\
Simulated output: {simulation}"
    )
}

pub fn alternative_request(attempted: &Action) -> String {
    format!("Previously, the action \"{attempted}\" has been attempted. Please explore a different action.")
}

pub fn backtrack_request(attempted: &Action, last: &str, current: &str) -> String {
    format!(
        "Previously, the action \"{attempted}\" has been attempted, and this action will not lead to the task completion. Please provide an action for going back to the last observation following the aforementioned format. Give your brief reason why this action cannot help to complete the task.\n\n\
Last Observation: {last}\n\
Current Observation: {current}"
    )
}

pub const OFF_TRACK_SYSTEM: &str = "\
You are an evaluator of a web agent task. You are given the task query, the navigation so far, and the web page the agent has just reached. Decide whether the agent can still complete the task by moving forward from this page, or whether it has gone off track and should go back.
Explain your reasoning, then end with a definitive verdict: either 'ON TRACK' or 'OFF TRACK'.";

pub fn off_track_user(task: &str, history: &str, current: &str) -> String {
    format!("Task: {task}\n\nNavigation so far:\n{history}\n\nCurrent page:\n{current}")
}

pub fn reprompt(error: &str) -> String {
    format!(
        "Your previous reply could not be used ({error}). Reply again in exactly this format: Thought: <your brief thoughts> Action: ```<one action>```"
    )
}
