fn main() { std::process::exit(percept_tts::cli::main()); }
