use std::collections::BTreeMap;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let argv: Vec<String> = std::env::args().collect();
    let env: BTreeMap<String, String> = std::env::vars().collect();
    let cwd = std::env::current_dir().unwrap_or_else(|_| ".".into());
    let code = geoflow_core::cli::main_with(&argv, &env, &cwd, &mut std::io::stdout(), &mut std::io::stderr());
    std::process::exit(code);
}
